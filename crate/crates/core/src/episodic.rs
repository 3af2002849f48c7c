//! C-way K-shot evaluation with context and detail prototypes, plus the
//! embedding-variance and activation-map diagnostics.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::data::{write_tensor_file, LabeledImages};
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{DcnModel, EvalFeatures};
use crate::tensor::Tensor;

const COSINE_EPS: f64 = 1e-12;

/// Indices into an image pool with episode-local labels `0..way`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    /// Pool classes chosen, in episode-label order.
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

/// Chooses `way` classes, then `shot + query` distinct samples from each.
/// `by_class[c]` lists the pool indices of class `c`.
pub fn sample_episode(
    by_class: &[Vec<usize>],
    way: usize,
    shot: usize,
    query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if way == 0 || shot == 0 || query == 0 {
        return Err(invalid!("way, shot and query must be positive"));
    }
    if by_class.len() < way {
        return Err(invalid!(
            "{way}-way episodes need {way} classes, only {} available",
            by_class.len()
        ));
    }
    if let Some((c, items)) = by_class
        .iter()
        .enumerate()
        .find(|(_, v)| v.len() < shot + query)
    {
        return Err(invalid!(
            "class {c} has {} samples, episodes need shot + query = {}",
            items.len(),
            shot + query
        ));
    }
    let classes = sample(rng, by_class.len(), way).into_vec();
    let mut support = Vec::with_capacity(way * shot);
    let mut queries = Vec::with_capacity(way * query);
    for (label, &c) in classes.iter().enumerate() {
        let picks = sample(rng, by_class[c].len(), shot + query).into_vec();
        for (n, &p) in picks.iter().enumerate() {
            let item = (by_class[c][p], label);
            if n < shot {
                support.push(item);
            } else {
                queries.push(item);
            }
        }
    }
    Ok(Episode {
        way,
        shot,
        queries_per_class: query,
        classes,
        support,
        query: queries,
    })
}

/// Context prototype `w_c` and detail prototype (pooled `Z_d`) of a class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypePair {
    pub context: Vec<f64>,
    pub detail: Vec<f64>,
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for r in rows {
        match acc.as_mut() {
            None => acc = Some(r.to_vec()),
            Some(a) => {
                if a.len() != r.len() {
                    return Err(shape_err!(
                        "feature lengths {} and {} differ",
                        a.len(),
                        r.len()
                    ));
                }
                a.iter_mut().zip(r).for_each(|(x, y)| *x += y);
            }
        }
        n += 1;
    }
    let acc = acc.ok_or_else(|| invalid!("class has no support samples"))?;
    if n == 1 {
        return Ok(acc);
    }
    Ok(acc.into_iter().map(|x| x / n as f64).collect())
}

/// Means of the support features of each class.
pub fn compute_prototypes(support: &[Vec<&EvalFeatures<f64>>]) -> Result<Vec<PrototypePair>> {
    support
        .iter()
        .map(|items| {
            Ok(PrototypePair {
                context: mean_of(items.iter().map(|f| f.context.as_slice()))?,
                detail: mean_of(items.iter().map(|f| f.detail.as_slice()))?,
            })
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < COSINE_EPS || nb < COSINE_EPS {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Average of the softmaxed cosine similarities of both branches.
pub fn predict_query(query: &EvalFeatures<f64>, prototypes: &[PrototypePair]) -> Result<Vec<f64>> {
    if prototypes.len() < 2 {
        return Err(invalid!("prediction needs at least 2 classes"));
    }
    let ctx: Vec<f64> = prototypes
        .iter()
        .map(|p| cosine(&query.context, &p.context))
        .collect();
    let det: Vec<f64> = prototypes
        .iter()
        .map(|p| cosine(&query.detail, &p.detail))
        .collect();
    let (a, b) = (softmax(&ctx), softmax(&det));
    Ok(a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `1.96 * s / sqrt(T)` with the sample standard deviation. Exactly zero
/// when all values are equal (the mean would otherwise carry roundoff).
pub fn ci95(values: &[f64]) -> f64 {
    let t = values.len();
    if t < 2 || values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / t as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
    1.96 * var.sqrt() / (t as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>, way: usize, shot: usize, query: usize) -> Self {
        let mean = accuracies.iter().sum::<f64>() / accuracies.len().max(1) as f64;
        let ci95 = ci95(&accuracies);
        Self {
            accuracies,
            mean,
            ci95,
            way,
            shot,
            query,
        }
    }

    /// `mean<TAB>ci95<TAB>T<TAB>C<TAB>K<TAB>Q`
    pub fn line(&self) -> String {
        format!(
            "{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
            self.mean,
            self.ci95,
            self.accuracies.len(),
            self.way,
            self.shot,
            self.query
        )
    }
}

/// Frozen forward pass over every image, in input order.
pub fn extract_features(
    model: &DcnModel<f32>,
    images: &[Tensor<f32>],
) -> Result<Vec<EvalFeatures<f64>>> {
    images
        .par_iter()
        .map(|img| {
            let f = model.features(img)?;
            Ok(EvalFeatures {
                context: f.context.iter().map(|&x| x as f64).collect(),
                detail: f.detail.iter().map(|&x| x as f64).collect(),
            })
        })
        .collect()
}

fn episode_accuracy(features: &[EvalFeatures<f64>], ep: &Episode) -> Result<f64> {
    let mut support: Vec<Vec<&EvalFeatures<f64>>> = vec![Vec::new(); ep.way];
    for &(i, y) in &ep.support {
        support[y].push(&features[i]);
    }
    let protos = compute_prototypes(&support)?;
    let mut correct = 0usize;
    for &(i, y) in &ep.query {
        if argmax(&predict_query(&features[i], &protos)?) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ep.query.len() as f64)
}

/// Runs `tasks` episodes over precomputed features. Episodes are drawn in
/// sequence from one seeded stream, so the report does not depend on
/// thread count.
pub fn evaluate_features(
    features: &[EvalFeatures<f64>],
    labels: &[usize],
    way: usize,
    shot: usize,
    query: usize,
    tasks: usize,
    seed: u64,
) -> Result<EvalReport> {
    if tasks == 0 {
        return Err(invalid!("need at least one task"));
    }
    if features.len() != labels.len() {
        return Err(shape_err!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        ));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    by_class.retain(|v| !v.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes = (0..tasks)
        .map(|_| sample_episode(&by_class, way, shot, query, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let accuracies = episodes
        .par_iter()
        .map(|ep| episode_accuracy(features, ep))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(accuracies, way, shot, query))
}

/// Frozen-model evaluation on a labelled pool of images.
pub fn evaluate(
    model: &DcnModel<f32>,
    data: &LabeledImages,
    way: usize,
    shot: usize,
    query: usize,
    tasks: usize,
    seed: u64,
) -> Result<EvalReport> {
    if let Some(img) = data.images.first() {
        if img.shape() != model.config.encoder.image_shape() {
            return Err(shape_err!(
                "images are {:?} but the model expects {:?}",
                img.shape(),
                model.config.encoder.image_shape()
            ));
        }
    }
    let features = extract_features(model, &data.images)?;
    evaluate_features(&features, &data.labels, way, shot, query, tasks, seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceReport {
    pub intra: f64,
    pub inter: f64,
}

impl VarianceReport {
    pub fn ratio(&self) -> f64 {
        self.inter / self.intra
    }

    /// `intra<TAB>inter`
    pub fn line(&self) -> String {
        format!("{:.6}\t{:.6}", self.intra, self.inter)
    }
}

fn l2n(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < COSINE_EPS {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / n).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn mean_pairwise(points: &[&[f64]]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            total += dist(points[i], points[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Euclidean spread of L2-normalised embeddings: mean within-class pairwise
/// distance (averaged over classes) and mean distance between centroids.
pub fn variance_report(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<VarianceReport> {
    if embeddings.len() != labels.len() {
        return Err(shape_err!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        ));
    }
    let normed: Vec<Vec<f64>> = embeddings.iter().map(|e| l2n(e)).collect();
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(invalid!("variance report needs at least 2 classes"));
    }
    let mut intra = 0.0;
    let mut centroids = Vec::with_capacity(ids.len());
    for &c in &ids {
        let members: Vec<&[f64]> = normed
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == c)
            .map(|(e, _)| e.as_slice())
            .collect();
        if members.len() == 1 {
            warn!("class {c} has a single sample; it adds 0 to the intra-class term");
        }
        intra += mean_pairwise(&members);
        centroids.push(mean_of(members.iter().copied())?);
    }
    let refs: Vec<&[f64]> = centroids.iter().map(|c| c.as_slice()).collect();
    Ok(VarianceReport {
        intra: intra / ids.len() as f64,
        inter: mean_pairwise(&refs),
    })
}

/// Channel means of `Z`, `Z~` and `Z_d` for one image, as `h x w` maps.
pub fn activation_maps(model: &DcnModel<f32>, image: &Tensor<f32>) -> Result<[Tensor<f32>; 3]> {
    let mut tape = Tape::inference();
    let vars = model.bind(&mut tape);
    let x = tape.constant(image.clone());
    let z = vars.encoder.encode(&mut tape, x)?;
    let enhanced = vars.condenser.condense(&mut tape, z)?.enhanced;
    let detail = vars.smelter.smelt(&mut tape, z)?.detail;
    let mut maps = Vec::with_capacity(3);
    for v in [z, enhanced, detail] {
        let m = tape.channel_mean(v)?;
        let (h, w) = (tape.shape(m)[0], tape.shape(m)[1]);
        maps.push(tape.value(m).clone().reshape(&[h, w])?);
    }
    Ok(maps.try_into().expect("three maps"))
}

fn min_max(t: &Tensor<f32>) -> Tensor<f32> {
    let lo = t.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    Tensor::from_fn(t.shape(), |i| {
        if span > 0.0 {
            (t.data()[i] - lo) / span
        } else {
            0.0
        }
    })
}

pub const MAP_NAMES: [&str; 3] = ["z", "z_tilde", "z_d"];

/// Writes six maps per image: `<name>_{z,z_tilde,z_d}.dcnt` and their
/// min-max normalised `_norm` variants. Returns the written paths.
pub fn export_activation_maps(
    model: &DcnModel<f32>,
    images: &[(String, Tensor<f32>)],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(images.len() * 6);
    for (name, img) in images {
        let maps = activation_maps(model, img)?;
        for (map, tag) in maps.iter().zip(MAP_NAMES) {
            let raw = out_dir.join(format!("{name}_{tag}.dcnt"));
            write_tensor_file(&raw, map)?;
            let norm = out_dir.join(format!("{name}_{tag}_norm.dcnt"));
            write_tensor_file(&norm, &min_max(map))?;
            written.push(raw);
            written.push(norm);
        }
    }
    Ok(written)
}

/// Convenience for the report command: per-branch variance over a split.
pub fn branch_variances(
    features: &[EvalFeatures<f64>],
    labels: &[usize],
) -> Result<(VarianceReport, VarianceReport)> {
    let ctx: Vec<Vec<f64>> = features.iter().map(|f| f.context.clone()).collect();
    let det: Vec<Vec<f64>> = features.iter().map(|f| f.detail.clone()).collect();
    Ok((
        variance_report(&ctx, labels)?,
        variance_report(&det, labels)?,
    ))
}
