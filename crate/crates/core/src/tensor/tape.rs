//! Reverse-mode tape.
//!
//! Each op appends a node holding its forward value; `backward` walks the
//! nodes once in reverse and accumulates vector-Jacobian products. Nodes are
//! only ever appended, so record order is a topological order.

use rand::RngCore;

use super::conv::{self, Conv2dDims, ConvTransposeDims};
use super::gemm::{gemm, MatRef};
use super::{split_axis, Float, Tensor};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    ConvTranspose2d { input: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    /// `[n, c, ...]` normalized per channel; `xhat` and `inv_std` saved for backward.
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Dropout { input: Var, mask: Vec<T> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum { input: Var, axis: usize },
    SumAll(Var),
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    MaskedSoftmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    L2Normalize { input: Var, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Relu masks replayed by the next relus, with the index of the next one.
    frozen: Option<(Vec<Vec<u64>>, usize)>,
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), frozen: None }
    }

    /// Makes the following relus pass exactly the units set in `masks` (one
    /// packed mask per relu, as from [`Tape::relu_patterns`]) instead of the
    /// positive ones, evaluating the linear piece the masks came from.
    /// Only forward values are affected.
    pub fn freeze_relus(&mut self, masks: Vec<Vec<u64>>) {
        self.frozen = Some((masks, 0));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{name}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn check_axis(&self, name: &str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(format!("{name}: axis {axis} out of range for {:?}", self.shape(x))));
        }
        Ok(())
    }

    // ---- convolutions -------------------------------------------------

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let d = Conv2dDims::infer(self.shape(input), self.shape(weight), self.shape(bias), stride, padding)?;
        let out = conv::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &d,
        );
        let value = Tensor::new(d.output_shape(), out)?;
        self.push("conv2d", value, Op::Conv2d { input, weight, bias, stride, padding }, &[input, weight, bias])
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let d = ConvTransposeDims::infer(self.shape(input), self.shape(weight), self.shape(bias), stride, padding)?;
        let out = conv::conv_transpose2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &d,
        );
        let value = Tensor::new(d.output_shape(), out)?;
        let op = Op::ConvTranspose2d { input, weight, bias, stride, padding };
        self.push("conv_transpose2d", value, op, &[input, weight, bias])
    }

    // ---- normalization ------------------------------------------------

    /// Batch normalization over `[n, c, ...]`. `running` is `[2, c]`: running
    /// mean in row 0, running variance in row 1. Train mode normalizes with
    /// batch statistics and updates `running`; eval mode reads it.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, running: &mut Tensor<T>, mode: Mode) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("batch_norm input must be at least 2-d, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.shape() != [2, c] {
            return Err(Error::shape(format!("batch_norm parameters do not match {c} channels")));
        }
        if n == 0 {
            return Err(Error::shape("batch_norm needs at least one example"));
        }
        let x = self.value(input).data();
        let count = n * plane;
        let eps = BATCH_NORM_EPS;
        let train = mode == Mode::Train;

        let (mean, inv_std): (Vec<f64>, Vec<f64>) = if train {
            let stats = par::map_indexed(c, |ch| {
                let mut sum = 0.0;
                for i in 0..n {
                    let s = (i * c + ch) * plane;
                    sum += x[s..s + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for i in 0..n {
                    let s = (i * c + ch) * plane;
                    sq += x[s..s + plane].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                }
                (mean, sq / count as f64)
            });
            let m = BATCH_NORM_MOMENTUM;
            let run = running.data_mut();
            for (ch, &(mean, var)) in stats.iter().enumerate() {
                let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
                run[ch] = T::of((1.0 - m) * run[ch].as_f64() + m * mean);
                run[c + ch] = T::of((1.0 - m) * run[c + ch].as_f64() + m * unbiased);
            }
            stats.iter().map(|&(mean, var)| (mean, 1.0 / (var + eps).sqrt())).unzip()
        } else {
            let run = running.data();
            (0..c).map(|ch| (run[ch].as_f64(), 1.0 / (run[c + ch].as_f64() + eps).sqrt())).unzip()
        };

        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        par::for_each_chunk_mut(&mut xhat, plane.max(1), |idx, chunk| {
            let ch = idx % c;
            let s = idx * plane;
            for (o, &v) in chunk.iter_mut().zip(&x[s..s + plane]) {
                *o = T::of((v.as_f64() - mean[ch]) * inv_std[ch]);
            }
        });
        let mut out = xhat.clone();
        par::for_each_chunk_mut(&mut out, plane.max(1), |idx, chunk| {
            let ch = idx % c;
            chunk.iter_mut().for_each(|v| *v = *v * g[ch] + b[ch]);
        });
        let value = Tensor::new(shape, out)?;
        let inv_std = inv_std.into_iter().map(T::of).collect();
        self.push("batch_norm", value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, train }, &[input, gamma, beta])
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!("layer_norm parameters do not match last dim {d}")));
        }
        let x = self.value(input).data();
        let rows = x.len() / d;
        let inv_std: Vec<T> = par::map_indexed(rows, |r| {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            T::of(1.0 / (var + LAYER_NORM_EPS).sqrt())
        });
        let mut xhat = vec![T::zero(); x.len()];
        par::for_each_chunk_mut(&mut xhat, d, |r, chunk| {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let is = inv_std[r].as_f64();
            for (o, &v) in chunk.iter_mut().zip(row) {
                *o = T::of((v.as_f64() - mean) * is);
            }
        });
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &v)| v * g[i % d] + b[i % d]).collect();
        let value = Tensor::new(shape, out)?;
        self.push("layer_norm", value, Op::LayerNorm { input, gamma, beta, xhat, inv_std }, &[input, gamma, beta])
    }

    // ---- linear algebra -----------------------------------------------

    /// `input[..., in] · weightᵀ + bias` with `weight: [out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let [out_dim, in_dim] = *self.shape(weight) else {
            return Err(Error::shape(format!("linear weight must be 2-d, got {:?}", self.shape(weight))));
        };
        if xs.last() != Some(&in_dim) {
            return Err(Error::shape(format!("linear input {xs:?} does not end in {in_dim}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape(format!("linear bias {:?}, expected [{out_dim}]", self.shape(b))));
            }
        }
        let rows = self.value(input).numel() / in_dim;
        let mut out = vec![T::zero(); rows * out_dim];
        if let Some(b) = bias {
            let b = self.value(b).data();
            out.chunks_mut(out_dim).for_each(|r| r.copy_from_slice(b));
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::new(self.value(input).data(), rows, in_dim),
            MatRef::new(self.value(weight).data(), out_dim, in_dim).t(),
            beta,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("linear", value, Op::Linear { input, weight, bias }, &inputs)
    }

    /// Matrix product of 2-d or batched 3-d operands. A 2-d right operand is
    /// broadcast over the batch of a 3-d left operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n, b_batched) = self.matmul_dims(a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let bi = if b_batched { &bv[i * k * n..(i + 1) * k * n] } else { bv };
            gemm(
                T::one(),
                MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(bi, k, n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if self.shape(a).len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    fn matmul_dims(&self, a: Var, b: Var) -> Result<(usize, usize, usize, usize, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || Error::shape(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n, false)),
            ([bt, m, k], [bt2, k2, n]) if k == k2 && bt == bt2 => Ok((*bt, *m, *k, *n, true)),
            ([bt, m, k], [k2, n]) if k == k2 => Ok((*bt, *m, *k, *n, false)),
            _ => Err(err()),
        }
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("transpose needs at least 2 dims, got {shape:?}")));
        }
        let value = transpose_last2(self.value(x));
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    // ---- elementwise --------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = match &mut self.frozen {
            Some((masks, next)) => {
                let mask = masks.get(*next).ok_or_else(|| Error::invalid("more relus than frozen masks"))?;
                *next += 1;
                let x = &self.nodes[x.0].value;
                if mask.len() != x.numel().div_ceil(64) {
                    return Err(Error::shape(format!("frozen relu mask does not cover {:?}", x.shape())));
                }
                let data = x.data().iter().enumerate().map(|(i, &v)| if mask[i / 64] >> (i % 64) & 1 == 1 { v } else { T::zero() });
                Tensor::new(x.shape().to_vec(), data.collect())?
            }
            None => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
        };
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// `ln σ(x)`, finite wherever `x` is, even when `σ(x)` underflows.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v >= T::zero() { -(-v).exp().ln_1p() } else { v - v.exp().ln_1p() });
        self.push("log_sigmoid", value, Op::LogSigmoid(x), &[x])
    }

    /// Sign pattern of every relu input on the tape, packed 64 per word, in
    /// recording order. Equal patterns mean both points lie in one linear piece;
    /// [`Tape::freeze_relus`] replays them.
    pub fn relu_patterns(&self) -> Vec<Vec<u64>> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(
                    self.value(x)
                        .data()
                        .chunks(64)
                        .map(|c| c.iter().enumerate().fold(0u64, |w, (i, &v)| w | ((v > T::zero()) as u64) << i))
                        .collect(),
                ),
                _ => None,
            })
            .collect()
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.ln());
        self.push("log", value, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        self.push("exp", value, Op::Exp(x), &[x])
    }

    /// Inverted dropout: in train mode survivors are scaled by `1 / (1 - p)`;
    /// eval mode and `p == 0` return `x` unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        // Each 64-bit draw decides two elements against a 32-bit threshold.
        let threshold = (p * 4_294_967_296.0) as u64;
        let numel = self.value(x).numel();
        let mut mask = Vec::with_capacity(numel + 1);
        while mask.len() < numel {
            let r = rng.next_u64();
            for half in [r & 0xFFFF_FFFF, r >> 32] {
                mask.push(if half < threshold { T::zero() } else { keep });
            }
        }
        mask.truncate(numel);
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { input: x, mask }, &[x])
    }

    fn zip_with(&self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        Tensor::new(va.shape().to_vec(), va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let c = T::of(factor);
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    // ---- reductions and normalizers -----------------------------------

    /// Sums over `axis`, removing it from the shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let value = Tensor::new(new_shape, out)?;
        self.push("sum", value, Op::Sum { input: x, axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let src = self.value(x);
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut out = vec![T::zero(); src.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src.data()[idx(a)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (src.data()[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[idx(a)] /= total;
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { input: x, axis }, &[x])
    }

    /// `x - logsumexp(x)` along `axis`. The dominant term of the sum is exactly
    /// one, so the log uses `ln_1p` of the remainder for full precision.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let src = self.value(x);
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut out = vec![T::zero(); src.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut arg = 0;
                for a in 1..len {
                    if src.data()[idx(a)] > src.data()[idx(arg)] {
                        arg = a;
                    }
                }
                let max = src.data()[idx(arg)];
                let rest: T = (0..len).filter(|&a| a != arg).map(|a| (src.data()[idx(a)] - max).exp()).sum();
                let log_rest = rest.ln_1p();
                for a in 0..len {
                    out[idx(a)] = (src.data()[idx(a)] - max) - log_rest;
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax { input: x, axis }, &[x])
    }

    /// Softmax over the last axis of `[batch, rows, keys]` restricted to valid
    /// keys. `key_mask` has `batch * keys` entries; masked keys get weight 0.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        let [batch, rows, keys] = *self.shape(x) else {
            return Err(Error::shape(format!("masked_softmax expects 3-d input, got {:?}", self.shape(x))));
        };
        if key_mask.len() != batch * keys {
            return Err(Error::shape(format!("key mask has {} entries, expected {}", key_mask.len(), batch * keys)));
        }
        for b in 0..batch {
            if !key_mask[b * keys..(b + 1) * keys].iter().any(|&m| m) {
                return Err(Error::invalid(format!("batch element {b} has no valid key")));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            let mask = &key_mask[b * keys..(b + 1) * keys];
            for r in 0..rows {
                let s = (b * rows + r) * keys;
                let row = &src[s..s + keys];
                let max = row.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (j, (&v, &m)) in row.iter().zip(mask).enumerate() {
                    if m {
                        let e = (v - max).exp();
                        out[s + j] = e;
                        total += e;
                    }
                }
                out[s..s + keys].iter_mut().for_each(|v| *v /= total);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("masked_softmax", value, Op::MaskedSoftmax(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let data = self.value(v).data();
                out.extend_from_slice(&data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Divides each vector along the last axis by `(‖v‖ + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("l2_normalize on a scalar"))?;
        let eps_t = T::of(eps);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            let denom = T::of(norm) + eps_t;
            row.iter_mut().for_each(|v| *v /= denom);
        }
        let value = Tensor::new(shape, out)?;
        self.push("l2_normalize", value, Op::L2Normalize { input: x, eps: eps_t }, &[x])
    }

    // ---- backward -----------------------------------------------------

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(node, &dy, &mut grads)?;
            // Interior gradients are only needed while walking the tape.
            grads[idx] = None;
        }
        // Keep leaf gradients only.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Vec<T>) -> Result<()> {
        if !self.needs(var) {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, v)| *a += v),
            slot @ None => *slot = Some(Tensor::new(self.shape(var).to_vec(), g)?),
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<T>, dy_t: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let dy = dy_t.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride, padding } => {
                let d = Conv2dDims::infer(self.shape(*input), self.shape(*weight), self.shape(*bias), *stride, *padding)?;
                let need_dx = self.needs(*input);
                let (dx, dw, db) =
                    conv::conv2d_backward(self.value(*input).data(), self.value(*weight).data(), dy, &d, need_dx);
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx)?;
                }
                self.accumulate(grads, *weight, dw)?;
                self.accumulate(grads, *bias, db)?;
            }
            Op::ConvTranspose2d { input, weight, bias, stride, padding } => {
                let d = ConvTransposeDims::infer(
                    self.shape(*input),
                    self.shape(*weight),
                    self.shape(*bias),
                    *stride,
                    *padding,
                )?;
                let need_dx = self.needs(*input);
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    dy,
                    &d,
                    need_dx,
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx)?;
                }
                self.accumulate(grads, *weight, dw)?;
                self.accumulate(grads, *bias, db)?;
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let shape = self.shape(*input);
                let (n, c) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let count = (n * plane) as f64;
                let g = self.value(*gamma).data();
                // Per channel: (Σ dy, Σ dy·xhat).
                let sums = par::map_indexed(c, |ch| {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for i in 0..n {
                        let s = (i * c + ch) * plane;
                        for p in s..s + plane {
                            s1 += dy[p].as_f64();
                            s2 += dy[p].as_f64() * xhat[p].as_f64();
                        }
                    }
                    (s1, s2)
                });
                let mut dx = vec![T::zero(); dy.len()];
                par::for_each_chunk_mut(&mut dx, plane.max(1), |idx, chunk| {
                    let ch = idx % c;
                    let s = idx * plane;
                    let gi = g[ch].as_f64() * inv_std[ch].as_f64();
                    let (s1, s2) = sums[ch];
                    for (k, o) in chunk.iter_mut().enumerate() {
                        let p = s + k;
                        *o = if *train {
                            T::of(gi * (dy[p].as_f64() - s1 / count - xhat[p].as_f64() * s2 / count))
                        } else {
                            T::of(gi * dy[p].as_f64())
                        };
                    }
                });
                self.accumulate(grads, *input, dx)?;
                self.accumulate(grads, *gamma, sums.iter().map(|s| T::of(s.1)).collect())?;
                self.accumulate(grads, *beta, sums.iter().map(|s| T::of(s.0)).collect())?;
            }
            Op::LayerNorm { input, gamma, beta, xhat, inv_std } => {
                let d = *self.shape(*input).last().unwrap();
                let g = self.value(*gamma).data();
                let mut dx = vec![T::zero(); dy.len()];
                par::for_each_chunk_mut(&mut dx, d, |r, chunk| {
                    let s = r * d;
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        let dxh = dy[s + j].as_f64() * g[j].as_f64();
                        s1 += dxh;
                        s2 += dxh * xhat[s + j].as_f64();
                    }
                    let is = inv_std[r].as_f64();
                    for (j, o) in chunk.iter_mut().enumerate() {
                        let dxh = dy[s + j].as_f64() * g[j].as_f64();
                        *o = T::of(is * (dxh - s1 / d as f64 - xhat[s + j].as_f64() * s2 / d as f64));
                    }
                });
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for (k, (&gy, &xh)) in dy.iter().zip(xhat).enumerate() {
                    dg[k % d] += gy * xh;
                    db[k % d] += gy;
                }
                self.accumulate(grads, *input, dx)?;
                self.accumulate(grads, *gamma, dg)?;
                self.accumulate(grads, *beta, db)?;
            }
            Op::Linear { input, weight, bias } => {
                let [out_dim, in_dim] = *self.shape(*weight) else { unreachable!() };
                let rows = dy.len() / out_dim;
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); rows * in_dim];
                    gemm(T::one(), MatRef::new(dy, rows, out_dim), MatRef::new(w, out_dim, in_dim), T::zero(), &mut dx);
                    self.accumulate(grads, *input, dx)?;
                }
                let mut dw = vec![T::zero(); out_dim * in_dim];
                gemm(T::one(), MatRef::new(dy, rows, out_dim).t(), MatRef::new(x, rows, in_dim), T::zero(), &mut dw);
                self.accumulate(grads, *weight, dw)?;
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); out_dim];
                    for row in dy.chunks(out_dim) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::MatMul { a, b } => {
                let (batch, m, k, n, b_batched) = self.matmul_dims(*a, *b)?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); batch * m * k];
                let mut db = vec![T::zero(); if b_batched { batch * k * n } else { k * n }];
                for i in 0..batch {
                    let dyi = MatRef::new(&dy[i * m * n..(i + 1) * m * n], m, n);
                    let bi = if b_batched { &bv[i * k * n..(i + 1) * k * n] } else { bv };
                    gemm(T::one(), dyi, MatRef::new(bi, k, n).t(), T::zero(), &mut da[i * m * k..(i + 1) * m * k]);
                    let ai = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
                    if b_batched {
                        gemm(T::one(), ai.t(), dyi, T::zero(), &mut db[i * k * n..(i + 1) * k * n]);
                    } else {
                        gemm(T::one(), ai.t(), dyi, T::one(), &mut db);
                    }
                }
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Transpose(x) => {
                let back = transpose_last2(dy_t);
                self.accumulate(grads, *x, back.into_data())?;
            }
            Op::Reshape(x) => self.accumulate(grads, *x, dy.to_vec())?,
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = dy.iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = dy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, dx)?;
            }
            Op::LogSigmoid(x) => {
                // d/dx ln σ(x) = σ(−x)
                let xv = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        let s = if v >= T::zero() {
                            let e = (-v).exp();
                            e / (T::one() + e)
                        } else {
                            T::one() / (T::one() + v.exp())
                        };
                        g * s
                    })
                    .collect();
                self.accumulate(grads, *x, dx)?;
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, dy.iter().zip(xv).map(|(&g, &v)| g / v).collect())?;
            }
            Op::Exp(x) => self.accumulate(grads, *x, dy.iter().zip(y).map(|(&g, &e)| g * e).collect())?,
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, dy.iter().zip(mask).map(|(&g, &m)| g * m).collect())?
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec())?;
                self.accumulate(grads, *b, dy.to_vec())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.to_vec())?;
                self.accumulate(grads, *b, dy.iter().map(|&g| -g).collect())?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, dy.iter().zip(bv).map(|(&g, &v)| g * v).collect())?;
                self.accumulate(grads, *b, dy.iter().zip(av).map(|(&g, &v)| g * v).collect())?;
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, dy.iter().map(|&g| g * *c).collect())?,
            Op::Sum { input, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*input), *axis);
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        dx[base..base + inner].copy_from_slice(&dy[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *input, dx)?;
            }
            Op::SumAll(x) => self.accumulate(grads, *x, vec![dy[0]; self.value(*x).numel()])?,
            Op::Softmax { input, axis } => {
                let dx = softmax_vjp(self.shape(*input), *axis, y, dy);
                self.accumulate(grads, *input, dx)?;
            }
            Op::MaskedSoftmax(x) => {
                let axis = self.shape(*x).len() - 1;
                let dx = softmax_vjp(self.shape(*x), axis, y, dy);
                self.accumulate(grads, *x, dx)?;
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*input), *axis);
                let mut dx = vec![T::zero(); dy.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let total: T = (0..len).map(|a| dy[idx(a)]).sum();
                        for a in 0..len {
                            dx[idx(a)] = dy[idx(a)] - y[idx(a)].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, *input, dx)?;
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        dx.extend_from_slice(&dy[s..s + len * inner]);
                    }
                    self.accumulate(grads, v, dx)?;
                    offset += len;
                }
            }
            Op::L2Normalize { input, eps } => {
                let x = self.value(*input).data();
                let d = *self.shape(*input).last().unwrap();
                let mut dx = vec![T::zero(); x.len()];
                for ((xr, gr), out) in x.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
                    let norm = xr.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                    let den = norm + eps.as_f64();
                    let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    for ((o, &xv), &g) in out.iter_mut().zip(xr).zip(gr) {
                        let radial = if norm > 0.0 { xv.as_f64() * xg / (norm * den * den) } else { 0.0 };
                        *o = T::of(g.as_f64() / den - radial);
                    }
                }
                self.accumulate(grads, *input, dx)?;
            }
        }
        Ok(())
    }
}

fn softmax_vjp<T: Float>(shape: &[usize], axis: usize, y: &[T], dy: &[T]) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![T::zero(); dy.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let dot: T = (0..len).map(|a| dy[idx(a)] * y[idx(a)]).sum();
            for a in 0..len {
                dx[idx(a)] = y[idx(a)] * (dy[idx(a)] - dot);
            }
        }
    }
    dx
}

fn transpose_last2<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let shape = t.shape();
    let nd = shape.len();
    let (m, n) = (shape[nd - 2], shape[nd - 1]);
    let batch = t.numel() / (m * n).max(1);
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(nd - 2, nd - 1);
    Tensor::new(new_shape, out).expect("transpose preserves element count")
}
