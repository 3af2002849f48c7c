//! Smelter network: parallel spatial and channel attention fused into a
//! residual sigmoid gate, `Z_d = sigmoid(fuse(Z_sp x Z_ch)) * Z + Z`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{join, Conv2d, ConvVars, Linear, LinearVars, Module};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SmelterParams<T> {
    pub spatial_conv3: Conv2d<T>,
    pub spatial_conv1: Conv2d<T>,
    pub channel_conv_a: Conv2d<T>,
    pub channel_conv_b: Conv2d<T>,
    pub fuse_conv: Conv2d<T>,
    pub head: Linear<T>,
    pub proj_pos: Linear<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct SmelterOutput {
    pub channel_squeezed: Var,
    pub spatial_squeezed: Var,
    pub spatial_attention: Var,
    pub channel_attention: Var,
    pub gate: Var,
    pub detail: Var,
}

/// Query, key and value matrices (`hw x c_bar`) for feature alignment.
/// All three are the same projection of `Z_d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignmentTriple {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SmelterVars {
    spatial_conv3: ConvVars,
    spatial_conv1: ConvVars,
    channel_conv_a: ConvVars,
    channel_conv_b: ConvVars,
    fuse_conv: ConvVars,
    head: LinearVars,
    proj_pos: LinearVars,
}

/// Widths of the smelter layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmelterShape {
    pub channels: usize,
    pub classes: usize,
    pub spatial_width: usize,
    pub reduction: usize,
    pub detail_dim: usize,
}

impl SmelterShape {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_width == 0 || self.detail_dim == 0 || self.classes == 0 {
            return Err(invalid!("smelter widths must be positive"));
        }
        if self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(invalid!(
                "channel reduction {} must divide channel count {}",
                self.reduction,
                self.channels
            ));
        }
        Ok(())
    }
}

impl<T: Real> SmelterParams<T> {
    pub fn init(shape: SmelterShape, rng: &mut impl Rng) -> Self {
        let c = shape.channels;
        let m = shape.spatial_width;
        let reduced = c / shape.reduction;
        Self {
            spatial_conv3: Conv2d::kaiming(3, 1, m, 2, 1, rng),
            spatial_conv1: Conv2d::kaiming(1, m, 1, 1, 0, rng),
            channel_conv_a: Conv2d::kaiming(1, c, reduced, 1, 0, rng),
            channel_conv_b: Conv2d::kaiming(1, reduced, c, 1, 0, rng),
            fuse_conv: Conv2d::kaiming(1, c, c, 1, 0, rng),
            head: Linear::kaiming(c, shape.classes, rng),
            proj_pos: Linear::kaiming(c, shape.detail_dim, rng),
        }
    }

    pub fn zeros(shape: SmelterShape) -> Self {
        let c = shape.channels;
        let m = shape.spatial_width;
        let reduced = c / shape.reduction;
        Self {
            spatial_conv3: Conv2d::zeros(3, 1, m, 2, 1),
            spatial_conv1: Conv2d::zeros(1, m, 1, 1, 0),
            channel_conv_a: Conv2d::zeros(1, c, reduced, 1, 0),
            channel_conv_b: Conv2d::zeros(1, reduced, c, 1, 0),
            fuse_conv: Conv2d::zeros(1, c, c, 1, 0),
            head: Linear::zeros(c, shape.classes),
            proj_pos: Linear::zeros(c, shape.detail_dim),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> SmelterVars {
        SmelterVars {
            spatial_conv3: self.spatial_conv3.bind(tape),
            spatial_conv1: self.spatial_conv1.bind(tape),
            channel_conv_a: self.channel_conv_a.bind(tape),
            channel_conv_b: self.channel_conv_b.bind(tape),
            fuse_conv: self.fuse_conv.bind(tape),
            head: self.head.bind(tape),
            proj_pos: self.proj_pos.bind(tape),
        }
    }
}

impl<T: Real> Module<T> for SmelterParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.spatial_conv3.visit(&join(prefix, "spatial_conv3"), f);
        self.spatial_conv1.visit(&join(prefix, "spatial_conv1"), f);
        self.channel_conv_a
            .visit(&join(prefix, "channel_conv_a"), f);
        self.channel_conv_b
            .visit(&join(prefix, "channel_conv_b"), f);
        self.fuse_conv.visit(&join(prefix, "fuse_conv"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.proj_pos.visit(&join(prefix, "proj_pos"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.spatial_conv3
            .visit_mut(&join(prefix, "spatial_conv3"), f);
        self.spatial_conv1
            .visit_mut(&join(prefix, "spatial_conv1"), f);
        self.channel_conv_a
            .visit_mut(&join(prefix, "channel_conv_a"), f);
        self.channel_conv_b
            .visit_mut(&join(prefix, "channel_conv_b"), f);
        self.fuse_conv.visit_mut(&join(prefix, "fuse_conv"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.proj_pos.visit_mut(&join(prefix, "proj_pos"), f);
    }
}

impl SmelterVars {
    pub fn smelt<T: Real>(&self, tape: &mut Tape<T>, z: Var) -> Result<SmelterOutput> {
        let (h, w, c) = match tape.shape(z) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(shape_err!("smelter expects h x w x c maps, got {s:?}")),
        };
        if h < 2 || w < 2 {
            return Err(shape_err!(
                "smelter needs feature maps of at least 2x2, got {h}x{w}"
            ));
        }
        let expected = tape.shape(self.fuse_conv.weight)[2];
        if c != expected {
            return Err(shape_err!("smelter expects {expected} channels, got {c}"));
        }
        let channel_squeezed = tape.channel_mean(z)?;
        let spatial_squeezed = tape.global_avg_pool(z)?;

        let coarse = self.spatial_conv3.apply(tape, channel_squeezed)?;
        let up = tape.upsample_nearest(coarse, h, w)?;
        let spatial_attention = self.spatial_conv1.apply(tape, up)?;

        let reduced = self.channel_conv_a.apply(tape, spatial_squeezed)?;
        let reduced = tape.relu(reduced);
        let channel_attention = self.channel_conv_b.apply(tape, reduced)?;

        let joint = tape.mul_broadcast(spatial_attention, channel_attention)?;
        let fused = self.fuse_conv.apply(tape, joint)?;
        let gate = tape.sigmoid(fused);
        let gated = tape.mul(gate, z)?;
        let detail = tape.add(gated, z)?;
        Ok(SmelterOutput {
            channel_squeezed,
            spatial_squeezed,
            spatial_attention,
            channel_attention,
            gate,
            detail,
        })
    }

    /// Detail logits `o~ = head(flatten(avg(Z_d)))`.
    pub fn detail_logits<T: Real>(&self, tape: &mut Tape<T>, detail: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(detail)?;
        let c = tape.value(pooled).len();
        let row = tape.reshape(pooled, &[1, c])?;
        let logits = self.head.apply(tape, row)?;
        let n = tape.value(logits).len();
        tape.reshape(logits, &[n])
    }

    /// Per-position projection `relu(row W + b)` of `Z_d` reshaped to `hw x c`.
    pub fn project_detail<T: Real>(
        &self,
        tape: &mut Tape<T>,
        detail: Var,
    ) -> Result<AlignmentTriple> {
        let (h, w, c) = match tape.shape(detail) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(shape_err!("project_detail expects h x w x c, got {s:?}")),
        };
        let rows = tape.reshape(detail, &[h * w, c])?;
        let projected = self.proj_pos.apply(tape, rows)?;
        let value = tape.relu(projected);
        Ok(AlignmentTriple {
            query: value,
            key: value,
            value,
        })
    }

    pub fn push_vars(&self, out: &mut Vec<Var>) {
        self.spatial_conv3.push_vars(out);
        self.spatial_conv1.push_vars(out);
        self.channel_conv_a.push_vars(out);
        self.channel_conv_b.push_vars(out);
        self.fuse_conv.push_vars(out);
        self.head.push_vars(out);
        self.proj_pos.push_vars(out);
    }
}
