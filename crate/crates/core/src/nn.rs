//! Named parameter storage and the small layers the model is built from.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{MlfError, Result};
use crate::math;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(NamedTensor { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.find(name)
            .map(|id| self.get(id))
            .ok_or_else(|| MlfError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor> {
        self.entries.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Overwrites every tensor with the same-named tensor of `other`; names
    /// and shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(MlfError::Data(alloc::format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for e in self.entries.iter_mut() {
            let src = other.by_name(&e.name)?;
            if src.shape() != e.value.shape() {
                return Err(MlfError::mismatch("load_params", e.value.shape(), src.shape()));
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

/// Deterministic per-tensor random stream: the same master seed and name
/// always produce the same values, regardless of what else was created.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `(-bound, bound)`.
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// Uniform with bound `1/sqrt(fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / math::sqrt(fan_in.max(1) as f64))
    }

    pub fn sample(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match self {
            Init::Zeros => alloc::vec![0.0; n],
            Init::Ones => alloc::vec![1.0; n],
            Init::Uniform(b) => {
                let d = Uniform::new(-b, b).expect("positive bound");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        Tensor::new(shape, data).expect("shape and data agree")
    }
}

/// Allocates named parameters with seeded initial values.
pub struct Builder<'a> {
    pub params: &'a mut ParamStore,
    pub buffers: &'a mut ParamStore,
    pub seed: u64,
}

impl Builder<'_> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let mut rng = param_rng(self.seed, name);
        let value = init.sample(shape, &mut rng);
        self.params.add(name, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.buffers.add(name, value)
    }
}

/// Whether batch norms use batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: the tape, the parameter leaves bound on it and the
/// batch-norm statistics to fold into running estimates afterwards.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a [Var],
    pub buffers: &'a ParamStore,
    pub mode: Mode,
    pub bn_updates: Vec<(ParamId, ParamId, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }
}

/// Puts every parameter on the tape, as a leaf when gradients are wanted.
pub fn bind(tape: &mut Tape, params: &ParamStore, requires_grad: bool) -> Vec<Var> {
    params
        .iter()
        .map(|e| {
            if requires_grad {
                tape.leaf(e.value.clone())
            } else {
                tape.constant(e.value.clone())
            }
        })
        .collect()
}

/// Folds observed batch statistics into running estimates.
pub fn apply_bn_updates(buffers: &mut ParamStore, updates: &[(ParamId, ParamId, BatchStats)]) {
    for (mean_id, var_id, stats) in updates {
        for (r, m) in buffers.get_mut(*mean_id).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in buffers.get_mut(*var_id).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

/// Affine map on the last axis; the weight is stored `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let init = Init::fan_in(fan_in);
        let weight = b.param(&alloc::format!("{name}.weight"), &[fan_in, fan_out], init);
        let bias = bias.then(|| b.param(&alloc::format!("{name}.bias"), &[fan_out], init));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last != self.fan_in {
            return Err(MlfError::mismatch("linear", &shape, &[self.fan_in, self.fan_out]));
        }
        let rows = shape.iter().product::<usize>() / last;
        let flat = if shape.len() == 2 { x } else { ctx.tape.reshape(x, &[rows, last])? };
        let mut y = ctx.tape.matmul(flat, ctx.p(self.weight))?;
        if let Some(bias) = self.bias {
            y = ctx.tape.add_broadcast(y, ctx.p(bias))?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.fan_out;
            ctx.tape.reshape(y, &out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// One ReLU hidden layer of width `max(in, out)`.
    #[default]
    Mlp,
    Linear,
}

#[derive(Debug, Clone, Copy)]
pub enum Decoder {
    Linear(Linear),
    Mlp(Linear, Linear),
}

impl Decoder {
    pub fn new(b: &mut Builder, name: &str, kind: DecoderKind, fan_in: usize, fan_out: usize) -> Self {
        match kind {
            DecoderKind::Linear => Decoder::Linear(Linear::new(b, name, fan_in, fan_out, true)),
            DecoderKind::Mlp => {
                let hidden = fan_in.max(fan_out);
                Decoder::Mlp(
                    Linear::new(b, &alloc::format!("{name}.0"), fan_in, hidden, true),
                    Linear::new(b, &alloc::format!("{name}.1"), hidden, fan_out, true),
                )
            }
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Decoder::Linear(l) => l.forward(ctx, x),
            Decoder::Mlp(a, b) => {
                let h = a.forward(ctx, x)?;
                let h = ctx.tape.relu(h)?;
                b.forward(ctx, h)
            }
        }
    }
}

/// Batch norm over the channels of a `[rows, channels]` input.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: b.param(&alloc::format!("{name}.gamma"), &[channels], Init::Ones),
            beta: b.param(&alloc::format!("{name}.beta"), &[channels], Init::Zeros),
            running_mean: b.buffer(&alloc::format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: b.buffer(&alloc::format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, BN_EPS)?;
                ctx.bn_updates.push((self.running_mean, self.running_var, stats));
                Ok(y)
            }
            Mode::Eval => {
                let rm = ctx.buffers.get(self.running_mean).data();
                let rv = ctx.buffers.get(self.running_var).data();
                ctx.tape.batch_norm_eval(x, g, b, rm, rv, BN_EPS)
            }
        }
    }

    /// Normalises the last axis of an arbitrary-rank input.
    pub fn forward_last_axis(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        let rows = shape.iter().product::<usize>() / c.max(1);
        let flat = ctx.tape.reshape(x, &[rows, c])?;
        let y = self.forward(ctx, flat)?;
        ctx.tape.reshape(y, &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_streams_depend_only_on_seed_and_name() {
        let a = Init::Normal(1.0).sample(&[4], &mut param_rng(7, "w"));
        let b = Init::Normal(1.0).sample(&[4], &mut param_rng(7, "w"));
        let c = Init::Normal(1.0).sample(&[4], &mut param_rng(7, "v"));
        let d = Init::Normal(1.0).sample(&[4], &mut param_rng(8, "w"));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn fan_in_init_respects_bound() {
        let t = Init::fan_in(16).sample(&[16, 8], &mut param_rng(1, "x"));
        assert!(t.data().iter().all(|v| v.abs() < 0.25));
    }

    #[test]
    fn linear_handles_rank_three_inputs() {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            buffers: &mut buffers,
            seed: 3,
        };
        let lin = Linear::new(&mut b, "lin", 3, 2, true);
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params, false);
        let x = tape.constant(Tensor::full(&[2, 4, 3], 1.0));
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &vars,
            buffers: &buffers,
            mode: Mode::Eval,
            bn_updates: Vec::new(),
        };
        let y = lin.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[2, 4, 2]);
        let w = params.get(lin.weight).data();
        let bias = params.get(lin.bias.unwrap()).data();
        let want0 = w[0] + w[2] + w[4] + bias[0];
        assert!((ctx.tape.value(y).data()[0] - want0).abs() < 1e-12);
    }

    #[test]
    fn load_from_checks_names_and_shapes() {
        let mut a = ParamStore::new();
        a.add("x", Tensor::zeros(&[2]));
        let mut b = ParamStore::new();
        b.add("x", Tensor::full(&[2], 3.0));
        a.load_from(&b).unwrap();
        assert_eq!(a.by_name("x").unwrap().data(), &[3.0, 3.0]);
        let mut c = ParamStore::new();
        c.add("x", Tensor::zeros(&[3]));
        assert!(a.load_from(&c).is_err());
        let mut d = ParamStore::new();
        d.add("y", Tensor::zeros(&[2]));
        assert!(a.load_from(&d).is_err());
    }
}
