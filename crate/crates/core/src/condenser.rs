//! Condenser network: squeeze/expand global-context enhancement.
//!
//! `Z_s = squeeze1(Z)`, `A = softmax over all h*w positions of Z_s`,
//! `Z_g = A * Z`, `Z~ = expand(relu(LN(squeeze2(Z_g)))) + Z`, `Z_c = avg(Z~)`.
//! The context head produces class logits from `Z_c` and the projection MLP
//! maps `Z_c` to a unit embedding for the context contrastive loss.

use rand::Rng;

use crate::autodiff::{NormGroup, SoftmaxGroup, Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::{join, Conv2d, ConvVars, Linear, LinearVars, Module};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CondenserParams<T> {
    pub squeeze1: Conv2d<T>,
    pub squeeze2: Conv2d<T>,
    pub expand: Conv2d<T>,
    pub head: Linear<T>,
    pub proj_hidden: Linear<T>,
    pub proj_out: Linear<T>,
}

/// Context features `Z_c`, a `1 x 1 x c` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeatures<T> {
    pub values: Tensor<T>,
}

/// Tape handles for every intermediate of one condenser pass.
#[derive(Clone, Copy, Debug)]
pub struct CondenserOutput {
    pub spatial_map: Var,
    pub attention: Var,
    pub gated: Var,
    pub expanded: Var,
    pub enhanced: Var,
    pub context: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CondenserVars {
    squeeze1: ConvVars,
    squeeze2: ConvVars,
    expand: ConvVars,
    head: LinearVars,
    proj_hidden: LinearVars,
    proj_out: LinearVars,
}

impl<T: Real> CondenserParams<T> {
    pub fn init(
        channels: usize,
        classes: usize,
        proj_hidden: usize,
        proj_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            squeeze1: Conv2d::kaiming(1, channels, 1, 1, 0, rng),
            squeeze2: Conv2d::kaiming(1, channels, 1, 1, 0, rng),
            expand: Conv2d::kaiming(1, 1, channels, 1, 0, rng),
            head: Linear::kaiming(channels, classes, rng),
            proj_hidden: Linear::kaiming(channels, proj_hidden, rng),
            proj_out: Linear::kaiming(proj_hidden, proj_dim, rng),
        }
    }

    pub fn zeros(channels: usize, classes: usize, proj_hidden: usize, proj_dim: usize) -> Self {
        Self {
            squeeze1: Conv2d::zeros(1, channels, 1, 1, 0),
            squeeze2: Conv2d::zeros(1, channels, 1, 1, 0),
            expand: Conv2d::zeros(1, 1, channels, 1, 0),
            head: Linear::zeros(channels, classes),
            proj_hidden: Linear::zeros(channels, proj_hidden),
            proj_out: Linear::zeros(proj_hidden, proj_dim),
        }
    }

    pub fn channels(&self) -> usize {
        self.expand.c_out()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> CondenserVars {
        CondenserVars {
            squeeze1: self.squeeze1.bind(tape),
            squeeze2: self.squeeze2.bind(tape),
            expand: self.expand.bind(tape),
            head: self.head.bind(tape),
            proj_hidden: self.proj_hidden.bind(tape),
            proj_out: self.proj_out.bind(tape),
        }
    }
}

impl<T: Real> Module<T> for CondenserParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.squeeze1.visit(&join(prefix, "squeeze1"), f);
        self.squeeze2.visit(&join(prefix, "squeeze2"), f);
        self.expand.visit(&join(prefix, "expand"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.proj_hidden.visit(&join(prefix, "proj_hidden"), f);
        self.proj_out.visit(&join(prefix, "proj_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.squeeze1.visit_mut(&join(prefix, "squeeze1"), f);
        self.squeeze2.visit_mut(&join(prefix, "squeeze2"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.proj_hidden.visit_mut(&join(prefix, "proj_hidden"), f);
        self.proj_out.visit_mut(&join(prefix, "proj_out"), f);
    }
}

impl CondenserVars {
    pub fn condense<T: Real>(&self, tape: &mut Tape<T>, z: Var) -> Result<CondenserOutput> {
        let c = self.expected_channels(tape);
        match tape.shape(z) {
            [_, _, zc] if *zc == c => {}
            s => return Err(shape_err!("condenser expects h x w x {c} maps, got {s:?}")),
        }
        let spatial_map = self.squeeze1.apply(tape, z)?;
        let attention = tape.softmax(spatial_map, SoftmaxGroup::All)?;
        let gated = tape.mul_broadcast(attention, z)?;
        let squeezed = self.squeeze2.apply(tape, gated)?;
        let normed = tape.layer_norm(squeezed, NormGroup::All, T::lit(NORM_EPS))?;
        let active = tape.relu(normed);
        let expanded = self.expand.apply(tape, active)?;
        let enhanced = tape.add(expanded, z)?;
        let context = tape.global_avg_pool(enhanced)?;
        Ok(CondenserOutput {
            spatial_map,
            attention,
            gated,
            expanded,
            enhanced,
            context,
        })
    }

    fn expected_channels<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.squeeze1.weight)[2]
    }

    /// Class logits `o = head(flatten(Z_c))`, a length-`C_base` vector.
    pub fn context_logits<T: Real>(&self, tape: &mut Tape<T>, context: Var) -> Result<Var> {
        let c = tape.value(context).len();
        let row = tape.reshape(context, &[1, c])?;
        let logits = self.head.apply(tape, row)?;
        let n = tape.value(logits).len();
        tape.reshape(logits, &[n])
    }

    /// Unit embedding `F = l2n(proj_out(relu(proj_hidden(Z_c))))`.
    pub fn project_context<T: Real>(&self, tape: &mut Tape<T>, context: Var) -> Result<Var> {
        let c = tape.value(context).len();
        let row = tape.reshape(context, &[1, c])?;
        let hidden = self.proj_hidden.apply(tape, row)?;
        let hidden = tape.relu(hidden);
        let out = self.proj_out.apply(tape, hidden)?;
        let d = tape.value(out).len();
        let out = tape.reshape(out, &[d])?;
        tape.l2_normalize(out, T::lit(NORMALIZE_EPS))
    }

    pub fn push_vars(&self, out: &mut Vec<Var>) {
        self.squeeze1.push_vars(out);
        self.squeeze2.push_vars(out);
        self.expand.push_vars(out);
        self.head.push_vars(out);
        self.proj_hidden.push_vars(out);
        self.proj_out.push_vars(out);
    }
}
