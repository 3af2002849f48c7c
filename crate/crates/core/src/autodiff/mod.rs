//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward operation appends a node holding its output value and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse order exactly once, accumulating gradients additively.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, grad_check_module, GradCheckReport};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Real, Tensor};
use kernels::ConvGeometry;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which entries a softmax normalizes together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxGroup {
    /// Every entry of the tensor forms one distribution.
    All,
    /// Each slice along the last axis is its own distribution.
    LastAxis,
}

/// Statistics grouping for [`Tape::layer_norm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormGroup {
    /// One mean/variance over the whole tensor.
    All,
    /// For an `h x w x c` tensor, one mean/variance per channel plane.
    ChannelPlanes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// `h x w x c` to `1 x 1 x c` channel means.
    GlobalAvg,
    /// Nearest-neighbour upsampling with `src = floor(dst * h / h')`.
    UpsampleNearest { height: usize, width: usize },
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulBroadcast(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Stack(Vec<Var>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Activation(Var, Activation),
    Softmax {
        input: Var,
        group_len: usize,
    },
    LayerNorm {
        input: Var,
        group: NormGroup,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvg(Var),
    ChannelMean(Var),
    Gather {
        input: Var,
        source: Vec<usize>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    AddBias {
        input: Var,
        bias: Var,
    },
    L2Normalize {
        input: Var,
        norm: T,
        eps: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SupCon {
        sim: Var,
        labels: Vec<usize>,
        tau: T,
        probs: Vec<T>,
        positives: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Recorded forward computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. `var`; zeros when `var` is not on the path to the loss.
    pub fn wrt(&self, var: Var) -> Vec<T> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); self.lens[var.0]])
    }
}

fn layer_norm_group(group: NormGroup, shape: &[usize]) -> Result<(usize, usize)> {
    // (number of groups, channel stride); element i belongs to group i % stride
    match group {
        NormGroup::All => Ok((1, 1)),
        NormGroup::ChannelPlanes => {
            if shape.len() != 3 {
                return Err(shape_err!(
                    "channel-plane layer norm needs h x w x c, got {shape:?}"
                ));
            }
            Ok((shape[2], shape[2]))
        }
    }
}

fn hwc(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(shape_err!(
            "{what} expects an h x w x c tensor, got {shape:?}"
        )),
    }
}

fn matrix(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(shape_err!("{what} expects a matrix, got {shape:?}")),
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records operations for a later backward pass.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that only evaluates values; nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = self.record && inputs.iter().any(|&v| self.tracked(v));
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf; it is differentiable when `t.requires_grad()`.
    pub fn var(&mut self, t: Tensor<T>) -> Var {
        let tracked = self.record && t.requires_grad();
        let mut value = t;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a differentiable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut t = t.clone();
        t.set_requires_grad(true);
        self.var(t)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.var(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Product of two `h x w x c` tensors where any axis of either operand
    /// may have size 1 and is repeated to match the other.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 {
            return Err(shape_err!(
                "mul_broadcast needs rank-3 operands, got {sa:?} and {sb:?}"
            ));
        }
        let mut out_shape = [0usize; 3];
        for d in 0..3 {
            out_shape[d] = match (sa[d], sb[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(shape_err!("mul_broadcast: {sa:?} and {sb:?} incompatible")),
            };
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for_each_broadcast(&out_shape, &sa, &sb, |_, ia, ib| out.push(da[ia] * db[ib]));
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::MulBroadcast(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.data(a).len() as f64);
        let s: T = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    /// `sum(a * b)` over equal-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Concatenates equal-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| invalid!("stack of zero tensors"))?;
        let inner = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.data(first).len());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(shape_err!("stack: {:?} vs {inner:?}", self.shape(p)));
            }
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Stack(parts.to_vec()), parts))
    }

    /// Cross-correlation of an `h x w x c_in` input with a `k x k x c_in x c_out`
    /// kernel plus per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (h, w, c_in) = hwc(self.shape(input), "conv2d input")?;
        let (k, c_out) = match self.shape(weight) {
            [k1, k2, ci, co] if k1 == k2 => {
                if *ci != c_in {
                    return Err(shape_err!(
                        "conv2d: kernel expects {ci} input channels, input has {c_in}"
                    ));
                }
                (*k1, *co)
            }
            s => {
                return Err(shape_err!(
                    "conv2d: kernel must be k x k x c_in x c_out, got {s:?}"
                ))
            }
        };
        if self.shape(bias) != [c_out] {
            return Err(shape_err!(
                "conv2d: bias shape {:?}, expected [{c_out}]",
                self.shape(bias)
            ));
        }
        if !(k == 1 || k == 3) {
            return Err(invalid!("conv2d: kernel size {k} not supported (1 or 3)"));
        }
        if !(stride == 1 || stride == 2) {
            return Err(invalid!("conv2d: stride {stride} not supported (1 or 2)"));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(shape_err!(
                "conv2d: output size would be non-positive for {h}x{w}, k={k}, padding={padding}"
            ));
        }
        let geom = ConvGeometry {
            h,
            w,
            c_in,
            k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        };
        let cols = kernels::im2col(self.data(input), &geom);
        let positions = geom.positions();
        let mut out = Vec::with_capacity(positions * c_out);
        let b = self.data(bias);
        for _ in 0..positions {
            out.extend_from_slice(b);
        }
        kernels::gemm_acc(
            &cols,
            self.data(weight),
            &mut out,
            positions,
            geom.patch_len(),
            c_out,
        );
        let out = Tensor::new(&[geom.out_h, geom.out_w, c_out], out)?;
        let op = Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        };
        Ok(self.push(out, op, &[input, weight, bias]))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Relu => self.map(a, |x| if x > T::zero() { x } else { T::zero() }),
            Activation::Sigmoid => self.map(a, kernels::sigmoid),
        };
        self.push(out, Op::Activation(a, kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, a: Var, group: SoftmaxGroup) -> Result<Var> {
        let group_len = match group {
            SoftmaxGroup::All => self.data(a).len(),
            SoftmaxGroup::LastAxis => *self
                .shape(a)
                .last()
                .ok_or_else(|| invalid!("softmax over the last axis of a scalar"))?,
        };
        if group_len == 0 {
            return Err(invalid!("softmax over an empty group"));
        }
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(group_len) {
            kernels::softmax_in_place(chunk);
        }
        Ok(self.push(
            out,
            Op::Softmax {
                input: a,
                group_len,
            },
            &[a],
        ))
    }

    /// `(x - mean) / sqrt(var + eps)` per group; population variance, no affine.
    pub fn layer_norm(&mut self, a: Var, group: NormGroup, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(invalid!("layer_norm eps must be positive"));
        }
        let (groups, stride) = layer_norm_group(group, self.shape(a))?;
        let x = self.data(a);
        let count = T::lit((x.len() / groups) as f64);
        let mut mean = vec![T::zero(); groups];
        for (i, &v) in x.iter().enumerate() {
            mean[i % stride] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![T::zero(); groups];
        for (i, &v) in x.iter().enumerate() {
            let d = v - mean[i % stride];
            var[i % stride] += d * d;
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v / count + eps).sqrt())
            .collect();
        let xhat: Vec<T> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % stride]) * inv_std[i % stride])
            .collect();
        let out = Tensor::new(self.shape(a), xhat.clone())?;
        let op = Op::LayerNorm {
            input: a,
            group,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, &[a]))
    }

    pub fn pool_and_resize(&mut self, a: Var, mode: PoolMode) -> Result<Var> {
        match mode {
            PoolMode::GlobalAvg => self.global_avg_pool(a),
            PoolMode::UpsampleNearest { height, width } => self.upsample_nearest(a, height, width),
        }
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = hwc(self.shape(a), "global_avg_pool")?;
        let mut out = vec![T::zero(); c];
        for px in self.data(a).chunks(c) {
            for (o, &v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let n = T::lit((h * w) as f64);
        out.iter_mut().for_each(|o| *o /= n);
        let out = Tensor::new(&[1, 1, c], out)?;
        Ok(self.push(out, Op::GlobalAvg(a), &[a]))
    }

    /// Per-position mean over channels: `h x w x c` to `h x w x 1`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = hwc(self.shape(a), "channel_mean")?;
        let n = T::lit(c as f64);
        let out: Vec<T> = self
            .data(a)
            .chunks(c)
            .map(|px| px.iter().copied().sum::<T>() / n)
            .collect();
        let out = Tensor::new(&[h, w, 1], out)?;
        Ok(self.push(out, Op::ChannelMean(a), &[a]))
    }

    pub fn upsample_nearest(&mut self, a: Var, height: usize, width: usize) -> Result<Var> {
        let (h, w, c) = hwc(self.shape(a), "upsample_nearest")?;
        if height < h || width < w {
            return Err(shape_err!(
                "upsample target {height}x{width} smaller than input {h}x{w}"
            ));
        }
        let mut source = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let sy = y * h / height;
            for x in 0..width {
                let sx = x * w / width;
                for ch in 0..c {
                    source.push((sy * w + sx) * c + ch);
                }
            }
        }
        let data = self.data(a);
        let out = Tensor::new(
            &[height, width, c],
            source.iter().map(|&i| data[i]).collect(),
        )?;
        Ok(self.push(out, Op::Gather { input: a, source }, &[a]))
    }

    /// Stride-2 max over non-overlapping 2x2 windows (floor on odd sizes).
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = hwc(self.shape(a), "max_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(shape_err!("max_pool2 on {h}x{w} leaves no output"));
        }
        let data = self.data(a);
        let mut source = Vec::with_capacity(oh * ow * c);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = ((2 * oy) * w + 2 * ox) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    source.push(best);
                }
            }
        }
        let out = Tensor::new(&[oh, ow, c], source.iter().map(|&i| data[i]).collect())?;
        Ok(self.push(out, Op::Gather { input: a, source }, &[a]))
    }

    /// Row `r` of an `m x n` matrix as a length-`n` vector.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let (m, n) = matrix(self.shape(a), "row")?;
        if r >= m {
            return Err(shape_err!("row {r} of a {m}-row matrix"));
        }
        let source: Vec<usize> = (r * n..(r + 1) * n).collect();
        let out = Tensor::new(&[n], self.data(a)[r * n..(r + 1) * n].to_vec())?;
        Ok(self.push(out, Op::Gather { input: a, source }, &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix(self.shape(a), "matmul lhs")?;
        let (k2, n) = matrix(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return Err(shape_err!("matmul: inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix(self.shape(a), "transpose")?;
        let d = self.data(a);
        let out = Tensor::new(
            &[n, m],
            (0..n * m).map(|i| d[(i % m) * n + i / m]).collect(),
        )?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = matrix(self.shape(a), "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(shape_err!(
                "add_bias: bias {:?} for {n} columns",
                self.shape(bias)
            ));
        }
        let b = self.data(bias).to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, &bv) in row.iter_mut().zip(&b) {
                *x += bv;
            }
        }
        Ok(self.push(out, Op::AddBias { input: a, bias }, &[a, bias]))
    }

    /// `x W + b` for `x: m x k`, `W: k x n`, `b: n`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_bias(xw, bias)
    }

    /// Treats the whole tensor as one vector: `x / max(|x|, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(invalid!("l2_normalize eps must be positive"));
        }
        let norm = self.data(a).iter().map(|&x| x * x).sum::<T>().sqrt();
        let denom = norm.max(eps);
        let out = self.map(a, |x| x / denom);
        Ok(self.push(
            out,
            Op::L2Normalize {
                input: a,
                norm,
                eps,
            },
            &[a],
        ))
    }

    /// Cosine of the flattened tensors; zero when either has zero norm.
    pub fn cosine(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let na = self.l2_normalize(a, eps)?;
        let nb = self.l2_normalize(b, eps)?;
        self.dot(na, nb)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, classes) = matrix(self.shape(logits), "cross_entropy")?;
        if labels.len() != m {
            return Err(shape_err!(
                "cross_entropy: {} labels for {m} rows",
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(invalid!("label {bad} outside [0, {classes})"));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (row, (&y, lrow)) in probs
            .chunks_mut(classes)
            .zip(labels.iter().zip(self.data(logits).chunks(classes)))
        {
            loss += kernels::log_sum_exp(lrow.iter().copied()) - lrow[y];
            kernels::softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / T::lit(m as f64));
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(out, op, &[logits]))
    }

    /// Supervised contrastive loss from an `M x M` similarity matrix:
    /// `-sum_i 1/P_i sum_{j != i, y_j = y_i} log(exp(s_ij/tau) / sum_{n != i} exp(s_in/tau))`.
    /// The diagonal is ignored.
    pub fn supervised_contrastive(&mut self, sim: Var, labels: &[usize], tau: T) -> Result<Var> {
        let (m, m2) = matrix(self.shape(sim), "supervised_contrastive")?;
        if m != m2 {
            return Err(shape_err!("similarity matrix must be square, got {m}x{m2}"));
        }
        if labels.len() != m {
            return Err(shape_err!("{} labels for {m} samples", labels.len()));
        }
        if m < 2 {
            return Err(invalid!("contrastive batch needs at least 2 samples"));
        }
        if tau <= T::zero() {
            return Err(invalid!("temperature must be positive"));
        }
        let s = self.data(sim);
        let mut probs = vec![T::zero(); m * m];
        let mut positives = vec![0usize; m];
        let mut loss = T::zero();
        for i in 0..m {
            let pos = (0..m).filter(|&j| j != i && labels[j] == labels[i]).count();
            if pos == 0 {
                return Err(invalid!("anchor {i} has no positive sample"));
            }
            positives[i] = pos;
            let logits = (0..m).filter(|&n| n != i).map(|n| s[i * m + n] / tau);
            let lse = kernels::log_sum_exp(logits);
            let mut anchor = T::zero();
            for j in 0..m {
                if j == i {
                    continue;
                }
                let z = s[i * m + j] / tau;
                probs[i * m + j] = (z - lse).exp();
                if labels[j] == labels[i] {
                    anchor += lse - z;
                }
            }
            loss += anchor / T::lit(pos as f64);
        }
        let op = Op::SupCon {
            sim,
            labels: labels.to_vec(),
            tau,
            probs,
            positives,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[sim]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(invalid!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.tracked(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, lens })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.tracked(v) {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        let add_into = |dst: &mut [T], src: &[T]| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s)
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(db) {
                        *d += s * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(da) {
                        *d += s * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c)
            }),
            Op::MulBroadcast(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = (self.data(*a), self.data(*b));
                let out_shape = node.value.shape();
                acc(*a, &mut |ga| {
                    for_each_broadcast(out_shape, sa, sb, |o, ia, ib| ga[ia] += g[o] * db[ib]);
                });
                acc(*b, &mut |gb| {
                    for_each_broadcast(out_shape, sa, sb, |o, ia, ib| gb[ib] += g[o] * da[ia]);
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let s = g[0] / T::lit(self.data(*a).len() as f64);
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += s));
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.data(p).len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let positions = geom.positions();
                let plen = geom.patch_len();
                let c_out = g.len() / positions;
                acc(*bias, &mut |gb| {
                    for row in g.chunks(c_out) {
                        add_into(gb, row);
                    }
                });
                acc(*weight, &mut |gw| {
                    kernels::gemm_at_b_acc(cols, g, gw, positions, plen, c_out)
                });
                if self.tracked(*input) {
                    let mut dcols = vec![T::zero(); positions * plen];
                    kernels::gemm_a_bt_acc(
                        g,
                        self.data(*weight),
                        &mut dcols,
                        positions,
                        c_out,
                        plen,
                    );
                    acc(*input, &mut |gi| kernels::col2im_acc(&dcols, geom, gi));
                }
            }
            Op::Activation(a, kind) => {
                let y = node.value.data();
                acc(*a, &mut |ga| match kind {
                    Activation::Relu => {
                        for ((d, &s), &yv) in ga.iter_mut().zip(g).zip(y) {
                            if yv > T::zero() {
                                *d += s;
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for ((d, &s), &yv) in ga.iter_mut().zip(g).zip(y) {
                            *d += s * yv * (T::one() - yv);
                        }
                    }
                });
            }
            Op::Softmax { input, group_len } => {
                let y = node.value.data();
                acc(*input, &mut |ga| {
                    for ((dg, gg), yg) in ga
                        .chunks_mut(*group_len)
                        .zip(g.chunks(*group_len))
                        .zip(y.chunks(*group_len))
                    {
                        let inner: T = gg.iter().zip(yg).map(|(&a, &b)| a * b).sum();
                        for ((d, &s), &yv) in dg.iter_mut().zip(gg).zip(yg) {
                            *d += yv * (s - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                group,
                xhat,
                inv_std,
            } => {
                let (groups, stride) =
                    layer_norm_group(*group, self.shape(*input)).expect("validated on forward");
                let count = T::lit((xhat.len() / groups) as f64);
                let mut sum_g = vec![T::zero(); groups];
                let mut sum_gx = vec![T::zero(); groups];
                for (i, (&s, &xh)) in g.iter().zip(xhat).enumerate() {
                    sum_g[i % stride] += s;
                    sum_gx[i % stride] += s * xh;
                }
                acc(*input, &mut |ga| {
                    for (i, d) in ga.iter_mut().enumerate() {
                        let k = i % stride;
                        *d += inv_std[k] / count * (count * g[i] - sum_g[k] - xhat[i] * sum_gx[k]);
                    }
                });
            }
            Op::GlobalAvg(a) => {
                let c = g.len();
                let n = T::lit((self.data(*a).len() / c) as f64);
                acc(*a, &mut |ga| {
                    for px in ga.chunks_mut(c) {
                        for (d, &s) in px.iter_mut().zip(g) {
                            *d += s / n;
                        }
                    }
                });
            }
            Op::ChannelMean(a) => {
                let c = self.data(*a).len() / g.len();
                let n = T::lit(c as f64);
                acc(*a, &mut |ga| {
                    for (px, &s) in ga.chunks_mut(c).zip(g) {
                        px.iter_mut().for_each(|d| *d += s / n);
                    }
                });
            }
            Op::Gather { input, source } => acc(*input, &mut |ga| {
                for (&src, &s) in source.iter().zip(g) {
                    ga[src] += s;
                }
            }),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| kernels::gemm_a_bt_acc(g, db, ga, m, n, k));
                acc(*b, &mut |gb| kernels::gemm_at_b_acc(da, g, gb, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::AddBias { input, bias } => {
                let n = self.data(*bias).len();
                acc(*input, &mut |ga| add_into(ga, g));
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::L2Normalize { input, norm, eps } => {
                let y = node.value.data();
                acc(*input, &mut |ga| {
                    if *norm > *eps {
                        let inner: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                        for ((d, &s), &yv) in ga.iter_mut().zip(g).zip(y) {
                            *d += (s - yv * inner) / *norm;
                        }
                    } else {
                        for (d, &s) in ga.iter_mut().zip(g) {
                            *d += s / *eps;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len();
                let classes = probs.len() / m;
                let scale = g[0] / T::lit(m as f64);
                acc(*logits, &mut |gl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let target = if c == y { T::one() } else { T::zero() };
                            gl[r * classes + c] += scale * (probs[r * classes + c] - target);
                        }
                    }
                });
            }
            Op::SupCon {
                sim,
                labels,
                tau,
                probs,
                positives,
            } => {
                let m = labels.len();
                let scale = g[0] / *tau;
                acc(*sim, &mut |gs| {
                    for i in 0..m {
                        let inv_p = T::one() / T::lit(positives[i] as f64);
                        for j in 0..m {
                            if j == i {
                                continue;
                            }
                            let target = if labels[j] == labels[i] {
                                inv_p
                            } else {
                                T::zero()
                            };
                            gs[i * m + j] += scale * (probs[i * m + j] - target);
                        }
                    }
                });
            }
        }
    }
}

/// Calls `f(out_index, a_index, b_index)` for every element of a rank-3
/// broadcast product.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let idx = |s: &[usize], y: usize, x: usize, c: usize| {
        let (y, x, c) = (
            if s[0] == 1 { 0 } else { y },
            if s[1] == 1 { 0 } else { x },
            if s[2] == 1 { 0 } else { c },
        );
        (y * s[1] + x) * s[2] + c
    };
    let mut o = 0;
    for y in 0..out[0] {
        for x in 0..out[1] {
            for c in 0..out[2] {
                f(o, idx(sa, y, x, c), idx(sb, y, x, c));
                o += 1;
            }
        }
    }
}
