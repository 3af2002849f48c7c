//! Parameter containers shared by the networks.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Anything holding named trainable tensors. `visit` and `visit_mut` must
/// walk the tensors in the same order as the matching `bind` records them.
pub trait Module<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Sets every parameter to zero.
    fn zero_parameters(&mut self) {
        self.visit_mut("", &mut |_, t| {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero())
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// He-uniform weights: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub(crate) fn kaiming_uniform<T: Real>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

/// `k x k` convolution weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(k: usize, c_in: usize, c_out: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[k, k, c_in, c_out]),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding,
        }
    }

    pub fn kaiming(
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: kaiming_uniform(&[k, k, c_in, c_out], k * k * c_in, rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ConvVars {
        ConvVars {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl ConvVars {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, self.bias, self.stride, self.padding)
    }

    pub fn push_vars(&self, out: &mut Vec<Var>) {
        out.extend([self.weight, self.bias]);
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Affine map on row vectors: `x W + b`, `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> Linear<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn kaiming(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: kaiming_uniform(&[d_in, d_out], d_in, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> LinearVars {
        LinearVars {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }
}

impl LinearVars {
    /// Applies the map to an `m x in` matrix.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.affine(x, self.weight, self.bias)
    }

    pub fn push_vars(&self, out: &mut Vec<Var>) {
        out.extend([self.weight, self.bias]);
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
