//! Small convolutional feature encoder producing `h x w x c` feature maps.
//!
//! Each block is `conv3x3 -> per-channel layer norm -> relu -> 2x2 max pool`,
//! with an optional identity skip (added before pooling) on blocks whose input
//! and output channel counts match.

use rand::Rng;

use crate::autodiff::{NormGroup, Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{join, Conv2d, ConvVars, Module};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub channels_per_block: Vec<usize>,
    pub residual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_height: 32,
            input_width: 32,
            input_channels: 3,
            channels_per_block: vec![32, 64, 64, 64],
            residual: false,
        }
    }
}

impl EncoderConfig {
    pub fn blocks(&self) -> usize {
        self.channels_per_block.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks() == 0 {
            return Err(invalid!("encoder needs at least one block"));
        }
        if self.input_channels == 0 || self.channels_per_block.contains(&0) {
            return Err(invalid!("channel counts must be positive"));
        }
        let factor = 1usize << self.blocks();
        if !self.input_height.is_multiple_of(factor) || !self.input_width.is_multiple_of(factor) {
            return Err(invalid!(
                "input {}x{} is not divisible by 2^{} = {factor}",
                self.input_height,
                self.input_width,
                self.blocks()
            ));
        }
        if self.input_height < factor || self.input_width < factor {
            return Err(invalid!("input too small for {} blocks", self.blocks()));
        }
        Ok(())
    }

    /// Shape `(h, w, c)` of the produced feature maps.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let factor = 1usize << self.blocks();
        (
            self.input_height / factor,
            self.input_width / factor,
            *self.channels_per_block.last().expect("validated"),
        )
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.input_height, self.input_width, self.input_channels]
    }
}

/// Feature maps `Z` produced by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps<T> {
    pub values: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub blocks: Vec<Conv2d<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    blocks: Vec<ConvVars>,
    residual: Vec<bool>,
    image_shape: [usize; 3],
}

impl<T: Real> EncoderParams<T> {
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut c_in = config.input_channels;
        let blocks = config
            .channels_per_block
            .iter()
            .map(|&c_out| {
                let conv = Conv2d::kaiming(3, c_in, c_out, 1, 1, rng);
                c_in = c_out;
                conv
            })
            .collect();
        Self { blocks }
    }

    pub fn bind(&self, tape: &mut Tape<T>, config: &EncoderConfig) -> EncoderVars {
        let mut c_in = config.input_channels;
        let residual = config
            .channels_per_block
            .iter()
            .map(|&c_out| {
                let skip = config.residual && c_in == c_out;
                c_in = c_out;
                skip
            })
            .collect();
        EncoderVars {
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            residual,
            image_shape: config.image_shape(),
        }
    }
}

impl<T: Real> Module<T> for EncoderParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

impl EncoderVars {
    /// Encodes one `H x W x C_in` image into feature maps `Z`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        if tape.shape(image) != self.image_shape {
            return Err(shape_err!(
                "encoder expects images of shape {:?}, got {:?}",
                self.image_shape,
                tape.shape(image)
            ));
        }
        let mut x = image;
        for (conv, &skip) in self.blocks.iter().zip(&self.residual) {
            let y = conv.apply(tape, x)?;
            let y = tape.layer_norm(y, NormGroup::ChannelPlanes, T::lit(NORM_EPS))?;
            let mut y = tape.relu(y);
            if skip {
                y = tape.add(y, x)?;
            }
            x = tape.max_pool2(y)?;
        }
        Ok(x)
    }

    pub fn push_vars(&self, out: &mut Vec<Var>) {
        for b in &self.blocks {
            b.push_vars(out);
        }
    }
}
