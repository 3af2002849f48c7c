use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub crop_fraction: f64,
    pub flip_prob: f64,
    pub jitter_range: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_fraction: 0.875,
            flip_prob: 0.5,
            jitter_range: 0.2,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(invalid!(
                "crop_fraction must be in (0, 1], got {}",
                self.crop_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid!(
                "flip_prob must be in [0, 1], got {}",
                self.flip_prob
            ));
        }
        if !(self.jitter_range >= 0.0) {
            return Err(invalid!(
                "jitter_range must be non-negative, got {}",
                self.jitter_range
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// Crop, resize back, random horizontal flip.
    First,
    /// As `First`, then brightness/contrast jitter clamped to the input range.
    Second,
}

fn crop_resize(
    img: &Tensor<f32>,
    top: usize,
    left: usize,
    ch_: usize,
    cw: usize,
    flip: bool,
) -> Tensor<f32> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    // endpoints of the crop map to endpoints of the output
    let coord = |o: usize, out: usize, len: usize| {
        if out == 1 || len == 1 {
            0.0
        } else {
            o as f64 * (len - 1) as f64 / (out - 1) as f64
        }
    };
    let px = |y: usize, x: usize, k: usize| img.data()[(y * w + x) * c + k] as f64;
    Tensor::from_fn(img.shape(), |i| {
        let (y, x, k) = (i / (w * c), (i / c) % w, i % c);
        let x = if flip { w - 1 - x } else { x };
        let sy = coord(y, h, ch_);
        let sx = coord(x, w, cw);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let (y1, x1) = ((y0 + 1).min(ch_ - 1), (x0 + 1).min(cw - 1));
        let (y0, y1, x0, x1) = (top + y0, top + y1, left + x0, left + x1);
        if fy == 0.0 && fx == 0.0 {
            return px(y0, x0, k) as f32;
        }
        let v = (1.0 - fy) * ((1.0 - fx) * px(y0, x0, k) + fx * px(y0, x1, k))
            + fy * ((1.0 - fx) * px(y1, x0, k) + fx * px(y1, x1, k));
        v as f32
    })
}

fn augment_one(
    img: &Tensor<f32>,
    view: View,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let ch_ = ((h as f64 * cfg.crop_fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * cfg.crop_fraction).round() as usize).clamp(1, w);
    let top = if ch_ < h {
        rng.gen_range(0..=h - ch_)
    } else {
        0
    };
    let left = if cw < w { rng.gen_range(0..=w - cw) } else { 0 };
    let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob);
    let mut out = crop_resize(img, top, left, ch_, cw, flip);
    if view == View::Second && cfg.jitter_range > 0.0 {
        let r = cfg.jitter_range;
        let contrast = 1.0 + rng.gen_range(-r..=r);
        let brightness = rng.gen_range(-r..=r);
        let lo = img.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = img.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for x in out.data_mut() {
            *x = ((*x as f64 * contrast + brightness) as f32).clamp(lo, hi);
        }
    }
    out
}

/// Returns `2N` views: item `i` is view one of input `i` and item `i + N` is
/// view two of the same input. Labels are duplicated in the same order.
pub fn augment_twice(
    images: &[Tensor<f32>],
    labels: &[usize],
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> (Vec<Tensor<f32>>, Vec<usize>) {
    let first: Vec<Tensor<f32>> = images
        .iter()
        .map(|x| augment_one(x, View::First, cfg, rng))
        .collect();
    let second: Vec<Tensor<f32>> = images
        .iter()
        .map(|x| augment_one(x, View::Second, cfg, rng))
        .collect();
    let mut views = first;
    views.extend(second);
    let mut doubled = labels.to_vec();
    doubled.extend_from_slice(labels);
    (views, doubled)
}
