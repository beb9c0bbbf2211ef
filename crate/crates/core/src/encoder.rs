//! Stacked encoder blocks over the concatenated multi-period tokens.
//!
//! Each block runs multi-head self-attention (with batch norm and a
//! feed-forward sublayer) over all tokens, splits the result back into period
//! blocks and applies a single-period head to each: one branch forecasts the
//! horizon, the other estimates the redundancy this period shares with longer
//! ones. Longer periods then subtract the scaled redundancy estimates of all
//! shorter periods before the next block.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{MlfError, Result};
use crate::math;
use crate::nn::{BatchNorm, Builder, Ctx, Linear};

/// Forecast and redundancy branches for one period.
#[derive(Debug, Clone, Copy)]
pub struct SppHead {
    pub forecast: Linear,
    pub redundancy: Linear,
}

impl SppHead {
    pub fn new(b: &mut Builder, name: &str, tokens: usize, d_model: usize, horizon: usize) -> Self {
        let flat = tokens * d_model;
        SppHead {
            forecast: Linear::new(b, &alloc::format!("{name}.forecast"), flat, horizon, true),
            redundancy: Linear::new(b, &alloc::format!("{name}.redundancy"), flat, flat, true),
        }
    }

    /// `[B, T, D] -> ([B, m], [B, T, D])`.
    pub fn forward(&self, ctx: &mut Ctx, block: Var) -> Result<(Var, Var)> {
        let shape = ctx.tape.shape(block).to_vec();
        let (b, t, d) = match *shape.as_slice() {
            [b, t, d] => (b, t, d),
            _ => return Err(MlfError::invalid("spp", &shape, "expected [batch, tokens, d_model]")),
        };
        let flat = ctx.tape.reshape(block, &[b, t * d])?;
        let forecast = self.forecast.forward(ctx, flat)?;
        let eps = self.redundancy.forward(ctx, flat)?;
        let eps = ctx.tape.reshape(eps, &shape)?;
        Ok((forecast, eps))
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_attn: BatchNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm_ff: BatchNorm,
    pub spp: Vec<SppHead>,
}

/// Output of one block.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// Filtered, re-concatenated tokens for the next block.
    pub next: Var,
    /// Per-period forecasts `[B, m]`.
    pub forecasts: Vec<Var>,
    /// Attention probabilities `[B * H, N, N]`, absent when attention is
    /// bypassed.
    pub scores: Option<Var>,
}

/// Which parts of a block are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSwitches {
    pub attention: bool,
    pub irf: bool,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        periods: usize,
        tokens_per_period: usize,
        horizon: usize,
    ) -> Self {
        let f = |s: &str| alloc::format!("{name}.{s}");
        EncoderBlock {
            heads,
            d_model,
            query: Linear::new(b, &f("attn.query"), d_model, d_model, false),
            key: Linear::new(b, &f("attn.key"), d_model, d_model, false),
            value: Linear::new(b, &f("attn.value"), d_model, d_model, false),
            out: Linear::new(b, &f("attn.out"), d_model, d_model, true),
            norm_attn: BatchNorm::new(b, &f("norm_attn"), d_model),
            ff_in: Linear::new(b, &f("ff.0"), d_model, d_ff, true),
            ff_out: Linear::new(b, &f("ff.1"), d_ff, d_model, true),
            norm_ff: BatchNorm::new(b, &f("norm_ff"), d_model),
            spp: (0..periods)
                .map(|s| SppHead::new(b, &alloc::format!("{name}.spp{s}"), tokens_per_period, d_model, horizon))
                .collect(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Multi-head attention followed by the normalised feed-forward
    /// sublayer: `z = BN(x + MHA(x)); z = BN(z + FFN(z))`.
    /// Returns the output and the attention probabilities.
    pub fn attention_layer(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let shape = ctx.tape.shape(x).to_vec();
        let (b, n, d) = match *shape.as_slice() {
            [b, n, d] if d == self.d_model => (b, n, d),
            _ => return Err(MlfError::invalid("attention", &shape, "expected [batch, tokens, d_model]")),
        };
        if self.heads == 0 || d % self.heads != 0 {
            return Err(MlfError::config(
                "n_heads",
                alloc::format!("d_model {d} is not divisible by {} heads", self.heads),
            ));
        }
        let (h, dk) = (self.heads, d / self.heads);
        let split_heads = |ctx: &mut Ctx, lin: &Linear| -> Result<Var> {
            let y = lin.forward(ctx, x)?;
            let y = ctx.tape.reshape(y, &[b, n, h, dk])?;
            let y = ctx.tape.permute(y, &[0, 2, 1, 3])?;
            ctx.tape.reshape(y, &[b * h, n, dk])
        };
        let q = split_heads(ctx, &self.query)?;
        let k = split_heads(ctx, &self.key)?;
        let v = split_heads(ctx, &self.value)?;
        let logits = ctx.tape.matmul_t(q, k, false, true)?;
        let logits = ctx.tape.scale(logits, 1.0 / math::sqrt(dk as f64))?;
        let scores = ctx.tape.softmax(logits, 2)?;
        let o = ctx.tape.matmul(scores, v)?;
        let o = ctx.tape.reshape(o, &[b, h, n, dk])?;
        let o = ctx.tape.permute(o, &[0, 2, 1, 3])?;
        let o = ctx.tape.reshape(o, &[b, n, d])?;
        let attn = self.out.forward(ctx, o)?;

        let z = ctx.tape.add(x, attn)?;
        let z = self.norm_attn.forward_last_axis(ctx, z)?;
        let f = self.ff_in.forward(ctx, z)?;
        let f = ctx.tape.relu(f)?;
        let f = self.ff_out.forward(ctx, f)?;
        let z2 = ctx.tape.add(z, f)?;
        let z2 = self.norm_ff.forward_last_axis(ctx, z2)?;
        Ok((z2, scores))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, switches: BlockSwitches) -> Result<BlockOutput> {
        let (z, scores) = if switches.attention {
            let (z, s) = self.attention_layer(ctx, x)?;
            (z, Some(s))
        } else {
            (x, None)
        };
        let parts = split_periods(ctx.tape, z, self.spp.len())?;
        let mut forecasts = Vec::with_capacity(parts.len());
        let mut redundancy = Vec::with_capacity(parts.len());
        for (head, &part) in self.spp.iter().zip(&parts) {
            let (f, e) = head.forward(ctx, part)?;
            forecasts.push(f);
            redundancy.push(e);
        }
        let filtered = if switches.irf {
            irf_filter(ctx.tape, &parts, &redundancy, self.head_dim())?
        } else {
            parts
        };
        let next = crate::squeeze::concat_periods(ctx.tape, &filtered)?;
        Ok(BlockOutput {
            next,
            forecasts,
            scores,
        })
    }
}

/// Splits `[B, S*T, D]` into `S` period blocks `[B, T, D]`.
pub fn split_periods(tape: &mut Tape, z: Var, periods: usize) -> Result<Vec<Var>> {
    if periods == 1 {
        return Ok(alloc::vec![z]);
    }
    tape.split(z, 1, periods)
}

/// `z_s - sum_{j < s} eps_j / sqrt(d_k)`; the shortest period is unchanged.
pub fn irf_filter(tape: &mut Tape, blocks: &[Var], redundancy: &[Var], d_k: usize) -> Result<Vec<Var>> {
    if blocks.len() != redundancy.len() {
        return Err(MlfError::mismatch("irf_filter", &[blocks.len()], &[redundancy.len()]));
    }
    let scale = 1.0 / math::sqrt(d_k as f64);
    let mut out = Vec::with_capacity(blocks.len());
    let mut running: Option<Var> = None;
    for (s, &z) in blocks.iter().enumerate() {
        out.push(match running {
            None => z,
            Some(acc) => {
                let scaled = tape.scale(acc, scale)?;
                tape.sub(z, scaled)?
            }
        });
        if s + 1 < blocks.len() {
            running = Some(match running {
                None => redundancy[s],
                Some(acc) => tape.add(acc, redundancy[s])?,
            });
        }
    }
    Ok(out)
}

/// Mean over blocks of each period's forecast; `forecasts[e][s]`.
pub fn aggregate_block_forecasts(tape: &mut Tape, forecasts: &[Vec<Var>]) -> Result<Vec<Var>> {
    let Some(first) = forecasts.first() else {
        return Err(MlfError::DegenerateInput("no encoder blocks".into()));
    };
    let e = forecasts.len();
    (0..first.len())
        .map(|s| {
            let mut acc = forecasts[0][s];
            for block in &forecasts[1..] {
                acc = tape.add(acc, block[s])?;
            }
            if e == 1 {
                Ok(acc)
            } else {
                tape.scale(acc, 1.0 / e as f64)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::nn::{bind, Mode, ParamStore};
    use crate::tensor::Tensor;
    use alloc::vec;

    fn build(d: usize, h: usize, s: usize, t: usize, m: usize, seed: u64) -> (EncoderBlock, ParamStore, ParamStore) {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let block = EncoderBlock::new(
            &mut Builder {
                params: &mut params,
                buffers: &mut buffers,
                seed,
            },
            "block0",
            d,
            h,
            2 * d,
            s,
            t,
            m,
        );
        (block, params, buffers)
    }

    fn input(shape: &[usize], seed: u64) -> Tensor {
        crate::nn::Init::Normal(1.0).sample(shape, &mut crate::nn::param_rng(seed, "input"))
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (block, params, buffers) = build(8, 2, 2, 3, 2, 5);
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params, false);
        let x = tape.constant(input(&[3, 6, 8], 1));
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &vars,
            buffers: &buffers,
            mode: Mode::Train,
            bn_updates: Vec::new(),
        };
        let (z, scores) = block.attention_layer(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(z), &[3, 6, 8]);
        let sv = ctx.tape.value(scores);
        assert_eq!(sv.shape(), &[6, 6, 6]);
        for row in sv.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn attention_is_convex_in_values() {
        // uniform value rows: any convex combination reproduces them
        let mut tape = Tape::new();
        let scores_in = tape.constant(input(&[1, 4, 4], 3));
        let scores = tape.softmax(scores_in, 2).unwrap();
        let v = tape.constant(Tensor::new(&[1, 4, 2], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap());
        let o = tape.matmul(scores, v).unwrap();
        for row in tape.value(o).data().chunks(2) {
            assert!((row[0] - 1.5).abs() < 1e-12 && (row[1] + 2.0).abs() < 1e-12);
        }
        // a single token attends only to itself
        let one = tape.constant(Tensor::new(&[1, 1, 1], vec![3.7]).unwrap());
        let p = tape.softmax(one, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0]);
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let (mut block, params, buffers) = build(6, 2, 1, 2, 1, 1);
        block.heads = 4;
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params, false);
        let x = tape.constant(input(&[1, 2, 6], 2));
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &vars,
            buffers: &buffers,
            mode: Mode::Train,
            bn_updates: Vec::new(),
        };
        assert!(matches!(
            block.attention_layer(&mut ctx, x),
            Err(MlfError::InvalidConfig { .. })
        ));
    }

    #[test]
    fn attention_layer_gradient() {
        // D = 4, 6 tokens
        let (block, params, buffers) = build(4, 2, 2, 3, 2, 9);
        let x0 = input(&[2, 6, 4], 4);
        let mut point: Vec<Tensor> = params.iter().map(|e| e.value.clone()).collect();
        point.push(x0);
        let rep = grad_check(
            |tape, xs| {
                let (ps, x) = xs.split_at(xs.len() - 1);
                let mut ctx = Ctx {
                    tape,
                    params: ps,
                    buffers: &buffers,
                    mode: Mode::Train,
                    bn_updates: Vec::new(),
                };
                let (z, _) = block.attention_layer(&mut ctx, x[0])?;
                let w = ctx.tape.constant(input(&[2, 6, 4], 8));
                let p = ctx.tape.mul(z, w)?;
                ctx.tape.sum(p)
            },
            &point,
            // the output bias feeds a batch norm, so its exact gradient is
            // zero and the difference quotient is pure rounding noise
            &GradCheckConfig {
                floor: 1e-4,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn spp_shapes_and_zero_weights() {
        let (block, mut params, buffers) = build(4, 2, 2, 3, 5, 2);
        for e in params.iter_mut() {
            if e.name.contains("spp") {
                e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params, false);
        let z = tape.constant(input(&[2, 3, 4], 3));
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &vars,
            buffers: &buffers,
            mode: Mode::Eval,
            bn_updates: Vec::new(),
        };
        for head in &block.spp {
            let (f, e) = head.forward(&mut ctx, z).unwrap();
            assert_eq!(ctx.tape.shape(f), &[2, 5]);
            assert_eq!(ctx.tape.shape(e), &[2, 3, 4]);
            assert!(ctx.tape.value(f).data().iter().all(|&v| v == 0.0));
            assert!(ctx.tape.value(e).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn spp_forecast_branch_gradient() {
        let (block, params, buffers) = build(4, 2, 2, 3, 2, 6);
        let head = block.spp[1];
        let w = params.get(head.forecast.weight).clone();
        let bias = params.get(head.forecast.bias.unwrap()).clone();
        let z0 = input(&[2, 3, 4], 5);
        let rep = grad_check(
            |tape, xs| {
                let mut vars = bind(tape, &params, false);
                vars[head.forecast.weight.index()] = xs[0];
                vars[head.forecast.bias.unwrap().index()] = xs[1];
                let mut ctx = Ctx {
                    tape,
                    params: &vars,
                    buffers: &buffers,
                    mode: Mode::Eval,
                    bn_updates: Vec::new(),
                };
                let (f, _) = head.forward(&mut ctx, xs[2])?;
                let t = ctx.tape.tanh(f)?;
                ctx.tape.sum(t)
            },
            &[w, bias, z0],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn irf_cases() {
        let mut tape = Tape::new();
        let z1 = tape.constant(Tensor::scalar(5.0));
        let z2 = tape.constant(Tensor::scalar(1.0));
        let e1 = tape.constant(Tensor::scalar(2.0));
        let e2 = tape.constant(Tensor::scalar(100.0));
        let out = irf_filter(&mut tape, &[z1, z2], &[e1, e2], 4).unwrap();
        assert_eq!(out[0], z1);
        assert_eq!(tape.value(out[1]).item(), 0.0);

        let zero = tape.constant(Tensor::scalar(0.0));
        let z3 = tape.constant(Tensor::scalar(-3.0));
        let out = irf_filter(&mut tape, &[z1, z2, z3], &[zero, zero, zero], 4).unwrap();
        assert_eq!(tape.value(out[1]).item(), 1.0);
        assert_eq!(tape.value(out[2]).item(), -3.0);

        // third period subtracts both shorter estimates
        let out = irf_filter(&mut tape, &[z1, z2, z3], &[e1, e1, e2], 1).unwrap();
        assert_eq!(tape.value(out[2]).item(), -7.0);
    }

    #[test]
    fn block_average() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::from_slice(&[1.0, 10.0]).unwrap());
        let three = tape.constant(Tensor::from_slice(&[3.0, 20.0]).unwrap());
        let avg = aggregate_block_forecasts(&mut tape, &[vec![one, three], vec![three, one]]).unwrap();
        assert_eq!(avg.len(), 2);
        assert_eq!(tape.value(avg[0]).data(), &[2.0, 15.0]);
        let single = aggregate_block_forecasts(&mut tape, &[vec![one]]).unwrap();
        assert_eq!(single[0], one);
    }

    #[test]
    fn split_blocks() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(&[1, 4, 1], vec![1., 2., 3., 4.]).unwrap());
        let p = split_periods(&mut tape, z, 2).unwrap();
        assert_eq!(tape.value(p[0]).data(), &[1., 2.]);
        assert_eq!(tape.value(p[1]).data(), &[3., 4.]);
        assert!(split_periods(&mut tape, z, 3).is_err());
    }
}
