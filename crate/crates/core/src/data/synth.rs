use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{load_dataset, DatasetManifest, Split, MANIFEST_FILE, TENSOR_EXT};
use super::tensor_file::write_tensor_file;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const CHANNELS: usize = 3;
const NOISE_STD: f64 = 0.1;
const PHASE_JITTER: f64 = 0.15;
const FREQUENCIES: [f64; 3] = [2.0, 3.5, 5.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Split of class `k`: base, base, val, novel, repeating.
pub fn split_of(k: usize) -> Split {
    match k % 4 {
        0 | 1 => Split::Base,
        2 => Split::Val,
        _ => Split::Novel,
    }
}

/// Noise-free texture of class `k`: a tinted sinusoid grating whose
/// orientation and frequency identify the class.
pub fn grating(k: usize, classes: usize, phase: f64, height: usize, width: usize) -> Tensor<f64> {
    let theta = PI * k as f64 / classes as f64;
    let freq = FREQUENCIES[k % FREQUENCIES.len()];
    let (ct, st) = (theta.cos(), theta.sin());
    let hue = k as f64 / classes as f64;
    let tint: Vec<f64> = (0..CHANNELS)
        .map(|ch| 0.65 + 0.35 * (2.0 * PI * (hue + ch as f64 / CHANNELS as f64)).cos())
        .collect();
    Tensor::from_fn(&[height, width, CHANNELS], |i| {
        let (y, x, ch) = (i / (width * CHANNELS), (i / CHANNELS) % width, i % CHANNELS);
        let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
        tint[ch] * (2.0 * PI * freq * (u * ct + v * st) + phase).sin()
    })
}

fn sample(k: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let phase = rng.gen_range(-PHASE_JITTER..=PHASE_JITTER);
    let clean = grating(k, spec.classes, phase, spec.height, spec.width);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    Tensor::from_fn(clean.shape(), |i| {
        (clean.data()[i] + noise.sample(rng)) as f32
    })
}

/// Writes `classes` texture families of `per_class` images each under
/// `out_root` together with `manifest.tsv`. Output depends only on `spec`.
pub fn synth_generate(out_root: impl AsRef<Path>, spec: &SynthSpec) -> Result<DatasetManifest> {
    if spec.classes < 4 {
        return Err(invalid!(
            "need at least 4 classes to cover base/val/novel, got {}",
            spec.classes
        ));
    }
    if spec.per_class == 0 || spec.height == 0 || spec.width == 0 {
        return Err(invalid!("per_class and image size must be positive"));
    }
    let root = out_root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let width = (spec.classes - 1).to_string().len().max(2);
    let mut manifest = format!("#shape\t{}\t{}\t{CHANNELS}\n", spec.height, spec.width);
    for k in 0..spec.classes {
        let name = format!("class{k:0width$}");
        manifest.push_str(&format!("{name}\t{}\n", split_of(k)));
        let dir = root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..spec.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((k as u64) << 32) | i as u64);
            write_tensor_file(
                dir.join(format!("{i:04}.{TENSOR_EXT}")),
                &sample(k, spec, &mut rng),
            )?;
        }
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    load_dataset(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn noise_free_correlations_separate_classes() {
        let classes = 8;
        for k in 0..classes {
            let a = grating(k, classes, -PHASE_JITTER, 32, 32);
            let b = grating(k, classes, PHASE_JITTER, 32, 32);
            let r = pearson(a.data(), b.data());
            assert!(r > 0.9, "class {k} within {r}");
            for j in 0..classes {
                if j != k {
                    let c = grating(j, classes, 0.0, 32, 32);
                    let r = pearson(a.data(), c.data()).abs();
                    assert!(r < 0.5, "classes {k},{j}: {r}");
                }
            }
        }
    }

    #[test]
    fn generates_round_robin_splits_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            classes: 8,
            per_class: 3,
            height: 8,
            width: 8,
            seed: 7,
        };
        let m = synth_generate(dir.path().join("a"), &spec).unwrap();
        assert_eq!(m.classes.len(), 8);
        assert_eq!(
            (
                m.count(Split::Base),
                m.count(Split::Val),
                m.count(Split::Novel)
            ),
            (4, 2, 2)
        );
        assert_eq!(m.image_shape, [8, 8, 3]);
        synth_generate(dir.path().join("b"), &spec).unwrap();
        for c in &m.classes {
            for f in &c.files {
                let rel = f.strip_prefix(dir.path().join("a")).unwrap();
                assert_eq!(
                    fs::read(f).unwrap(),
                    fs::read(dir.path().join("b").join(rel)).unwrap()
                );
            }
        }
        assert_eq!(
            fs::read(dir.path().join("a").join(MANIFEST_FILE)).unwrap(),
            fs::read(dir.path().join("b").join(MANIFEST_FILE)).unwrap()
        );
        let other = synth_generate(dir.path().join("c"), &SynthSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(
            fs::read(&other.classes[0].files[0]).unwrap(),
            fs::read(&m.classes[0].files[0]).unwrap()
        );
    }

    #[test]
    fn rejects_too_few_classes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            classes: 3,
            per_class: 2,
            height: 8,
            width: 8,
            seed: 0,
        };
        assert!(synth_generate(dir.path(), &spec).is_err());
    }
}
