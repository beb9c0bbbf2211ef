//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append a node holding the output value and whatever the backward rule
//! needs; [`Tape::backward`] then walks the nodes in reverse creation order,
//! which is a valid reverse topological order because a node can only refer
//! to nodes created before it. Each node is visited once and adjoints of
//! shared subexpressions are summed before they are propagated further.
//!
//! The graph is rebuilt for every batch. Parameters enter as leaves via
//! [`Tape::leaf`], data via [`Tape::constant`].

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{MlfError, Result};
use crate::math;
use crate::tensor::{axis_extents, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

/// User-defined primitive with a hand-written backward rule.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, given the upstream gradient of
    /// the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &[f64]) -> Vec<Vec<f64>>;
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Scale(..) => "scale",
            Op::Act(_, Activation::Tanh) => "tanh",
            Op::Act(_, Activation::Sigmoid) => "sigmoid",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Mse { .. } => "mse",
            Op::Conv1d { .. } => "conv1d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MaxPool { .. } => "max_pool",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaves, indexed like `nodes`.
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input; receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(MlfError::NonFinite { op: op.name() });
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes the last two axes.
    ///
    /// Both operands are rank 2, or both rank 3 with equal leading (batch)
    /// dimension.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, ra, ca, rb, cb) = match (sa.as_slice(), sb.as_slice()) {
            (&[r1, c1], &[r2, c2]) => (1, r1, c1, r2, c2),
            (&[b1, r1, c1], &[b2, r2, c2]) if b1 == b2 => (b1, r1, c1, r2, c2),
            _ => return Err(MlfError::mismatch("matmul", &sa, &sb)),
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(MlfError::mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    ta,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            rg,
        )
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(MlfError::mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `x + y` where `y`'s shape equals the trailing dimensions of `x`
    /// (bias rows, positional tables).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sy = self.shape(y);
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(MlfError::mismatch("add_broadcast", sx, sy));
        }
        let yv = self.value(y).data();
        let inner = yv.len();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (d, &b) in chunk.iter_mut().zip(yv) {
                *d += b;
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, y]);
        self.push(t, Op::AddBroadcast(x, y), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(t.shape(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let t = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Activation::Tanh => math::tanh,
            Activation::Sigmoid => math::sigmoid,
            Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
        };
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Act(x, kind), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(MlfError::invalid("softmax", t.shape(), alloc::format!("axis {axis} out of range")));
        }
        let (outer, dim, inner) = axis_extents(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut max = f64::NEG_INFINITY;
                for d in 0..dim {
                    max = max.max(src[base + d * inner]);
                }
                let mut sum = 0.0;
                for d in 0..dim {
                    let e = math::exp(src[base + d * inner] - max);
                    out[base + d * inner] = e;
                    sum += e;
                }
                for d in 0..dim {
                    out[base + d * inner] /= sum;
                }
            }
        }
        let t = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax { x, axis }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || core::mem::replace(&mut seen[p], true)) {
            return Err(MlfError::invalid("permute", t.shape(), alloc::format!("bad permutation {perm:?}")));
        }
        let (shape, data) = permute_data(t.shape(), t.data(), perm);
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(MlfError::invalid("transpose", self.shape(x), "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(MlfError::DegenerateInput("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(MlfError::invalid("concat", &first, "axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(MlfError::mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(parts);
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(MlfError::invalid(
                "narrow",
                t.shape(),
                alloc::format!("cannot take [{start}, {}) on axis {axis}", start + len),
            ));
        }
        let (outer, dim, inner) = axis_extents(t.shape(), axis);
        let src = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Narrow { x, axis, start }, rg)
    }

    /// Splits `x` into `count` equal chunks along `axis`.
    pub fn split(&mut self, x: Var, axis: usize, count: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || count == 0 || !shape[axis].is_multiple_of(count) {
            return Err(MlfError::invalid(
                "split",
                &shape,
                alloc::format!("axis {axis} not divisible into {count} chunks"),
            ));
        }
        let len = shape[axis] / count;
        (0..count).map(|i| self.narrow(x, axis, i * len, len)).collect()
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums out `axis`; the axis is removed (a rank-1 input gives shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(MlfError::invalid("sum_axis", t.shape(), "axis out of range"));
        }
        let (outer, dim, inner) = axis_extents(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::SumAxis { x, axis }, rg)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(MlfError::mismatch("mse", p.shape(), t.shape()));
        }
        let s = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred, target]);
        self.push(Tensor::scalar(s), Op::Mse { pred, target }, rg)
    }

    /// Stride-1 1-D convolution, `x: [B, C_in, T]`, `w: [F, C_in, k]`,
    /// zero padding `pad` on both ends, no bias.
    pub fn conv1d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (b, cin, t, f, k) = match (sx.as_slice(), sw.as_slice()) {
            (&[b, c, t], &[f, c2, k]) if c == c2 => (b, c, t, f, k),
            _ => return Err(MlfError::mismatch("conv1d", &sx, &sw)),
        };
        if t + 2 * pad < k {
            return Err(MlfError::invalid("conv1d", &sx, "input shorter than kernel"));
        }
        let to = t + 2 * pad - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; b * f * to];
        for bi in 0..b {
            for fi in 0..f {
                let o = &mut out[(bi * f + fi) * to..(bi * f + fi + 1) * to];
                for c in 0..cin {
                    let xrow = &xv[(bi * cin + c) * t..(bi * cin + c + 1) * t];
                    for j in 0..k {
                        let wj = wv[(fi * cin + c) * k + j];
                        // input index = out index + j - pad
                        for (ti, ov) in o.iter_mut().enumerate() {
                            let src = ti + j;
                            if src >= pad && src - pad < t {
                                *ov += wj * xrow[src - pad];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b, f, to], out)?;
        let rg = self.rg(&[x, w]);
        self.push(t, Op::Conv1d { x, w, pad }, rg)
    }

    /// Training-mode batch norm on `x: [R, C]`, normalising each column with
    /// the statistics of its `R` entries.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (r, c) = self.bn_shapes(x, gamma, beta)?;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in xv.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= r as f64;
        }
        for row in xv.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / r as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|s| if r > 1 { s / (r - 1) as f64 } else { 0.0 }).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let rg = self.rg(&[x, gamma, beta]);
        let out = self.push(
            Tensor::new(&[r, c], value)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: true,
            },
            rg,
        )?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch norm using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (r, c) = self.bn_shapes(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(MlfError::mismatch("batch_norm", &[c], &[running_mean.len(), running_var.len()]));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(&[r, c], value)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: false,
            },
            rg,
        )
    }

    fn bn_shapes(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let sx = self.shape(x);
        let (r, c) = match *sx {
            [r, c] => (r, c),
            _ => return Err(MlfError::invalid("batch_norm", sx, "expected [rows, channels]")),
        };
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(MlfError::mismatch("batch_norm", sx, self.shape(p)));
            }
        }
        Ok((r, c))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let c = g.len();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        (out, xhat)
    }

    /// Max pooling over the last axis with window 2 and stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let len = *t.shape().last().unwrap_or(&0);
        if len < 2 {
            return Err(MlfError::DegenerateInput(alloc::format!(
                "max pooling needs at least 2 steps, got {len}"
            )));
        }
        let half = len / 2;
        let rows = t.len() / len;
        let src = t.data();
        let mut out = Vec::with_capacity(rows * half);
        let mut argmax = Vec::with_capacity(rows * half);
        for r in 0..rows {
            for i in 0..half {
                let a = r * len + 2 * i;
                let idx = if src[a + 1] > src[a] { a + 1 } else { a };
                out.push(src[idx]);
                argmax.push(idx);
            }
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = half;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::MaxPool { x, argmax }, rg)
    }

    /// Records a user-supplied primitive whose forward value is `output`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    // ------------------------------------------------------------ backward

    /// Back-propagates from a scalar `loss`, adding into the gradients of
    /// every leaf that requires one. Calling it twice accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(MlfError::NotScalar(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot => *slot = Some(g),
                }
                continue;
            }
            propagate(&self.nodes, i, &g, &mut adj);
        }
        Ok(())
    }
}

/// Zero-initialised adjoint buffer for `v`, or `None` if `v` needs no gradient.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(nodes: &[Node], adj: &mut [Option<Vec<f64>>], v: Var, g: impl IntoIterator<Item = f64>) {
    if let Some(buf) = slot(nodes, adj, v) {
        for (a, x) in buf.iter_mut().zip(g) {
            *a += x;
        }
    }
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
        } => {
            if let Some(buf) = slot(nodes, adj, a) {
                let bv = val(b);
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let bs = &bv[bi * k * n..(bi + 1) * k * n];
                    let da = &mut buf[bi * m * k..(bi + 1) * m * k];
                    if !ta {
                        // dA = dC · op(B)^T
                        gemm(m, n, k, gs, false, bs, !tb, da, 1.0);
                    } else {
                        // dA_stored = op(B) · dC^T
                        gemm(k, n, m, bs, tb, gs, true, da, 1.0);
                    }
                }
            }
            if let Some(buf) = slot(nodes, adj, b) {
                let av = val(a);
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let as_ = &av[bi * m * k..(bi + 1) * m * k];
                    let db = &mut buf[bi * k * n..(bi + 1) * k * n];
                    if !tb {
                        // dB = op(A)^T · dC
                        gemm(k, m, n, as_, !ta, gs, false, db, 1.0);
                    } else {
                        // dB_stored = dC^T · op(A)
                        gemm(n, m, k, gs, true, as_, ta, db, 1.0);
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            add_into(nodes, adj, a, g.iter().copied());
            add_into(nodes, adj, b, g.iter().copied());
        }
        &Op::Sub(a, b) => {
            add_into(nodes, adj, a, g.iter().copied());
            add_into(nodes, adj, b, g.iter().map(|v| -v));
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            add_into(nodes, adj, a, g.iter().zip(bv).map(|(x, y)| x * y));
            add_into(nodes, adj, b, g.iter().zip(av).map(|(x, y)| x * y));
        }
        &Op::AddBroadcast(x, y) => {
            add_into(nodes, adj, x, g.iter().copied());
            if let Some(buf) = slot(nodes, adj, y) {
                let inner = buf.len();
                for chunk in g.chunks(inner) {
                    for (a, v) in buf.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
            }
        }
        &Op::Scale(x, c) => add_into(nodes, adj, x, g.iter().map(|v| v * c)),
        &Op::Act(x, kind) => match kind {
            Activation::Tanh => add_into(nodes, adj, x, g.iter().zip(out).map(|(d, y)| d * (1.0 - y * y))),
            Activation::Sigmoid => add_into(nodes, adj, x, g.iter().zip(out).map(|(d, y)| d * y * (1.0 - y))),
            Activation::Relu => add_into(
                nodes,
                adj,
                x,
                g.iter().zip(val(x)).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }),
            ),
        },
        &Op::Softmax { x, axis } => {
            if let Some(buf) = slot(nodes, adj, x) {
                let (outer, dim, inner) = axis_extents(node.value.shape(), axis);
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * dim * inner + ii;
                        let dot: f64 = (0..dim).map(|d| g[base + d * inner] * out[base + d * inner]).sum();
                        for d in 0..dim {
                            let p = base + d * inner;
                            buf[p] += out[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        &Op::Reshape(x) => add_into(nodes, adj, x, g.iter().copied()),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, back) = permute_data(node.value.shape(), g, &inv);
            add_into(nodes, adj, *x, back);
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_extents(node.value.shape(), *axis);
            let mut offset = 0;
            let total = node.value.shape()[*axis];
            for &p in parts {
                let d = nodes[p.0].value.shape()[*axis];
                if let Some(buf) = slot(nodes, adj, p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                        for (a, v) in buf[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
                offset += d;
            }
        }
        &Op::Narrow { x, axis, start } => {
            if let Some(buf) = slot(nodes, adj, x) {
                let (outer, dim, inner) = axis_extents(nodes[x.0].value.shape(), axis);
                let len = node.value.shape()[axis];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    for (a, v) in buf[base..base + len * inner].iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *a += v;
                    }
                }
            }
        }
        &Op::Sum(x) => {
            let n = nodes[x.0].value.len();
            add_into(nodes, adj, x, core::iter::repeat_n(g[0], n));
        }
        &Op::Mean(x) => {
            let n = nodes[x.0].value.len();
            add_into(nodes, adj, x, core::iter::repeat_n(g[0] / n as f64, n));
        }
        &Op::SumAxis { x, axis } => {
            if let Some(buf) = slot(nodes, adj, x) {
                let (outer, dim, inner) = axis_extents(nodes[x.0].value.shape(), axis);
                for o in 0..outer {
                    for d in 0..dim {
                        let dst = &mut buf[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (a, v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *a += v;
                        }
                    }
                }
            }
        }
        &Op::Mse { pred, target } => {
            let (p, t) = (val(pred), val(target));
            let c = 2.0 * g[0] / p.len() as f64;
            add_into(nodes, adj, pred, p.iter().zip(t).map(|(a, b)| c * (a - b)));
            add_into(nodes, adj, target, p.iter().zip(t).map(|(a, b)| -c * (a - b)));
        }
        &Op::Conv1d { x, w, pad } => {
            let sx = nodes[x.0].value.shape();
            let sw = nodes[w.0].value.shape();
            let (b, cin, t) = (sx[0], sx[1], sx[2]);
            let (f, k) = (sw[0], sw[2]);
            let to = node.value.shape()[2];
            let (xv, wv) = (val(x), val(w));
            if let Some(buf) = slot(nodes, adj, x) {
                for bi in 0..b {
                    for fi in 0..f {
                        let go = &g[(bi * f + fi) * to..(bi * f + fi + 1) * to];
                        for c in 0..cin {
                            let dx = &mut buf[(bi * cin + c) * t..(bi * cin + c + 1) * t];
                            for j in 0..k {
                                let wj = wv[(fi * cin + c) * k + j];
                                for (ti, gv) in go.iter().enumerate() {
                                    let src = ti + j;
                                    if src >= pad && src - pad < t {
                                        dx[src - pad] += wj * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(buf) = slot(nodes, adj, w) {
                for bi in 0..b {
                    for fi in 0..f {
                        let go = &g[(bi * f + fi) * to..(bi * f + fi + 1) * to];
                        for c in 0..cin {
                            let xrow = &xv[(bi * cin + c) * t..(bi * cin + c + 1) * t];
                            for j in 0..k {
                                let mut acc = 0.0;
                                for (ti, gv) in go.iter().enumerate() {
                                    let src = ti + j;
                                    if src >= pad && src - pad < t {
                                        acc += gv * xrow[src - pad];
                                    }
                                }
                                buf[(fi * cin + c) * k + j] += acc;
                            }
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => {
            let c = inv_std.len();
            let r = g.len() / c;
            let gv = val(*gamma);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    sum_g[j] += grow[j];
                    sum_gx[j] += grow[j] * hrow[j];
                }
            }
            if let Some(buf) = slot(nodes, adj, *x) {
                let rf = r as f64;
                for ((brow, grow), hrow) in buf.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        let scale = gv[j] * inv_std[j];
                        brow[j] += if *training {
                            scale * (grow[j] - sum_g[j] / rf - hrow[j] * sum_gx[j] / rf)
                        } else {
                            scale * grow[j]
                        };
                    }
                }
            }
            add_into(nodes, adj, *gamma, sum_gx);
            add_into(nodes, adj, *beta, sum_g);
        }
        Op::MaxPool { x, argmax } => {
            if let Some(buf) = slot(nodes, adj, *x) {
                for (&idx, v) in argmax.iter().zip(g) {
                    buf[idx] += v;
                }
            }
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let grads = op.backward(&ins, &node.value, g);
            for (&v, gi) in inputs.iter().zip(grads) {
                add_into(nodes, adj, v, gi);
            }
        }
    }
}

/// `c = op(a) · op(b) + beta · c` for row-major `m x k` and `k x n` operands,
/// where a transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    // stride in the input for each output axis
    let s: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += s[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= s[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}
