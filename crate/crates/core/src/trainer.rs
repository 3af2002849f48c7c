//! Multi-task pre-training: two augmented views per image, cross-entropy on
//! both heads, both contrastive losses, momentum SGD.

use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::contrastive::{ccl_loss, combined_cl, dcl_loss, ContrastiveBatch, DetailCosine};
use crate::data::{augment_twice, AugmentationConfig, LabeledImages};
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{DcnModel, ModelVars};
use crate::nn::Module;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(LrSchedule::Constant),
            "cosine" => Some(LrSchedule::Cosine),
            _ => None,
        }
    }

    pub fn lr_at(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                base * 0.5
                    * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_n: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub tau: f64,
    pub tau_detail: f64,
    pub detail_cosine: DetailCosine,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0005,
            alpha: 1.0,
            beta: 0.1,
            gamma: 1.0,
            epochs: 20,
            batch_n: 2,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            tau: 0.1,
            tau_detail: 0.1,
            detail_cosine: DetailCosine::Flattened,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid!(
                "lr must be finite and non-negative, got {}",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.tau > 0.0 && self.tau_detail > 0.0) {
            return Err(invalid!("temperatures must be positive"));
        }
        if self.batch_n < 2 {
            return Err(invalid!("batch_n must be at least 2, got {}", self.batch_n));
        }
        self.augmentation.validate()
    }
}

/// Loss components of one step (or means over an epoch).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ce_context: f64,
    pub l_ce_detail: f64,
    pub l_ce: f64,
    pub l_ccl: f64,
    pub l_dcl: f64,
    pub l_cl: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    fn fields(&self) -> [f64; 7] {
        [
            self.l_ce_context,
            self.l_ce_detail,
            self.l_ce,
            self.l_ccl,
            self.l_dcl,
            self.l_cl,
            self.l_total,
        ]
    }

    fn from_fields(f: [f64; 7]) -> Self {
        Self {
            l_ce_context: f[0],
            l_ce_detail: f[1],
            l_ce: f[2],
            l_ccl: f[3],
            l_dcl: f[4],
            l_cl: f[5],
            l_total: f[6],
        }
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let mut acc = [0.0; 7];
        for it in items {
            for (a, v) in acc.iter_mut().zip(it.fields()) {
                *a += v;
            }
        }
        let n = items.len().max(1) as f64;
        Self::from_fields(acc.map(|a| a / n))
    }

    /// `epoch<TAB>l_ce<TAB>l_ccl<TAB>l_dcl<TAB>l_total`
    pub fn metrics_line(&self, epoch: usize) -> String {
        format!(
            "{epoch}\t{}\t{}\t{}\t{}",
            self.l_ce, self.l_ccl, self.l_dcl, self.l_total
        )
    }
}

/// Tape handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_ce_context: Var,
    pub l_ce_detail: Var,
    pub l_ce: Var,
    pub l_ccl: Var,
    pub l_dcl: Var,
    pub l_cl: Var,
    pub l_total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> Result<LossBreakdown> {
        let v = |x: Var| tape.value(x).item().map(Real::as_f64);
        Ok(LossBreakdown {
            l_ce_context: v(self.l_ce_context)?,
            l_ce_detail: v(self.l_ce_detail)?,
            l_ce: v(self.l_ce)?,
            l_ccl: v(self.l_ccl)?,
            l_dcl: v(self.l_dcl)?,
            l_cl: v(self.l_cl)?,
            l_total: v(self.l_total)?,
        })
    }
}

/// `CE(o) + beta * CE(o~)`, each a mean over rows.
pub fn cross_entropy_pair<T: Real>(
    tape: &mut Tape<T>,
    context_logits: Var,
    detail_logits: Var,
    labels: &[usize],
    beta: T,
) -> Result<(Var, Var, Var)> {
    let ctx = tape.cross_entropy(context_logits, labels)?;
    let det = tape.cross_entropy(detail_logits, labels)?;
    let weighted = tape.scale(det, beta);
    let total = tape.add(ctx, weighted)?;
    Ok((ctx, det, total))
}

/// Records the whole training objective for a batch of already augmented
/// views. `views[i]` and `views[i + N]` must be two views of one image.
pub fn build_loss<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    views: &[Tensor<T>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<LossVars> {
    if views.len() != labels.len() {
        return Err(shape_err!(
            "{} views but {} labels",
            views.len(),
            labels.len()
        ));
    }
    if views.len() < 2 || !views.len().is_multiple_of(2) {
        return Err(invalid!(
            "expected an even number (>= 2) of views, got {}",
            views.len()
        ));
    }
    let mut context_logits = Vec::with_capacity(views.len());
    let mut detail_logits = Vec::with_capacity(views.len());
    let mut embeddings = Vec::with_capacity(views.len());
    let mut triples = Vec::with_capacity(views.len());
    for v in views {
        let x = tape.constant(v.clone());
        let out = vars.forward_view(tape, x)?;
        context_logits.push(out.context_logits);
        detail_logits.push(out.detail_logits);
        embeddings.push(out.embedding);
        triples.push(out.triple);
    }
    let o = tape.stack(&context_logits)?;
    let o_detail = tape.stack(&detail_logits)?;
    let (l_ce_context, l_ce_detail, l_ce) =
        cross_entropy_pair(tape, o, o_detail, labels, T::lit(cfg.beta))?;

    let ccl = ContrastiveBatch::new(embeddings, labels.to_vec(), T::lit(cfg.tau))?;
    let l_ccl = ccl_loss(tape, &ccl)?;
    let dcl = ContrastiveBatch::new(triples, labels.to_vec(), T::lit(cfg.tau_detail))?;
    let l_dcl = dcl_loss(tape, &dcl, cfg.detail_cosine)?;
    let l_cl = combined_cl(tape, l_ccl, l_dcl, T::lit(cfg.alpha))?;
    let weighted = tape.scale(l_cl, T::lit(cfg.gamma));
    let l_total = tape.add(l_ce, weighted)?;
    Ok(LossVars {
        l_ce_context,
        l_ce_detail,
        l_ce,
        l_ccl,
        l_dcl,
        l_cl,
        l_total,
    })
}

/// Momentum SGD with decoupled-free L2 weight decay:
/// `v <- m v - lr (g + wd theta)`, `theta <- theta + v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &impl Module<T>, momentum: f64, weight_decay: f64) -> Self {
        let mut velocity = Vec::new();
        model.visit("", &mut |_, t| velocity.push(vec![T::zero(); t.len()]));
        Self {
            momentum: T::lit(momentum),
            weight_decay: T::lit(weight_decay),
            velocity,
        }
    }

    /// Applies one update; `grads[i]` belongs to the `i`-th visited tensor.
    pub fn step(&mut self, model: &mut impl Module<T>, grads: &[Vec<T>], lr: T) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(shape_err!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            ));
        }
        let mut i = 0;
        let mut err = None;
        model.visit_mut("", &mut |name, t| {
            let (g, v) = (&grads[i], &mut self.velocity[i]);
            i += 1;
            if g.len() != t.len() || v.len() != t.len() {
                err.get_or_insert_with(|| shape_err!("gradient size mismatch for {name}"));
                return;
            }
            for ((theta, vel), &grad) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = self.momentum * *vel - lr * (grad + self.weight_decay * *theta);
                if *vel != T::zero() {
                    *theta += *vel;
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}

pub(crate) fn collect_grads<T: Real>(grads: &Gradients<T>, leaves: &[Var]) -> Vec<Vec<T>> {
    leaves.iter().map(|&v| grads.wrt(v)).collect()
}

/// One optimisation step on `images`: augment, forward all `2N` views,
/// backpropagate `l_total` and update in place.
pub fn train_step(
    model: &mut DcnModel<f32>,
    opt: &mut Sgd<f32>,
    images: &[Tensor<f32>],
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    if images.len() < 2 {
        return Err(invalid!(
            "a training step needs at least 2 images, got {}",
            images.len()
        ));
    }
    let (views, view_labels) = augment_twice(images, labels, &cfg.augmentation, rng);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let loss = build_loss(&mut tape, &vars, &views, &view_labels, cfg)?;
    let breakdown = loss.breakdown(&tape)?;
    if !breakdown.l_total.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {breakdown:?}")));
    }
    let grads = tape.backward(loss.l_total)?;
    let mut leaves = Vec::new();
    vars.push_vars(&mut leaves);
    let grads = collect_grads(&grads, &leaves);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    opt.step(model, &grads, lr as f32)?;
    Ok(breakdown)
}

/// Splits a shuffled index list into batches of `n`, folding a trailing
/// singleton into the previous batch.
fn batches(order: &[usize], n: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(n).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let len = out.len();
        let start = (len - 2) * n;
        out.truncate(len - 2);
        out.push(&order[start..]);
    }
    out
}

/// Per-epoch mean losses of a finished run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<LossBreakdown>,
}

/// Trains `model` for `cfg.epochs` epochs on `data`, appending one metrics
/// line per epoch to `metrics`.
pub fn run_training(
    model: &mut DcnModel<f32>,
    data: &LabeledImages,
    cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    if data.num_classes() < 2 {
        return Err(invalid!(
            "training needs at least 2 classes, got {}",
            data.num_classes()
        ));
    }
    if data.len() < 2 {
        return Err(invalid!("training needs at least 2 images"));
    }
    if data.num_classes() != model.config.num_classes {
        return Err(invalid!(
            "model has {} output classes but the training split has {}",
            model.config.num_classes,
            data.num_classes()
        ));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let mut opt = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut shuffle_rng);
        let mut steps = Vec::new();
        for batch in batches(&order, cfg.batch_n) {
            let images: Vec<Tensor<f32>> = batch.iter().map(|&i| data.images[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            steps.push(train_step(
                model,
                &mut opt,
                &images,
                &labels,
                cfg,
                lr,
                &mut aug_rng,
            )?);
        }
        let mean = LossBreakdown::mean(&steps);
        info!(
            "epoch {}: l_total {:.4} (ce {:.4}, ccl {:.4}, dcl {:.4})",
            epoch + 1,
            mean.l_total,
            mean.l_ce,
            mean.l_ccl,
            mean.l_dcl
        );
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(w, "{}", mean.metrics_line(epoch + 1))
                .map_err(|e| Error::io("metrics log", e))?;
        }
        report.epochs.push(mean);
    }
    Ok(report)
}
