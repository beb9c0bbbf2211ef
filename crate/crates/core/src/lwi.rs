//! Learnable weighted-average integration of the per-period forecasts.
//!
//! A small CNN over the longest window produces a feature vector from which
//! a gated map yields one weight per period and horizon step.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{MlfError, Result};
use crate::nn::{BatchNorm, Builder, Ctx, Init, Linear, ParamId};

pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy)]
pub struct LwiParams {
    /// `[F, 1, 3]`, no bias.
    pub conv: ParamId,
    pub norm: BatchNorm,
    pub gate_a: Linear,
    pub gate_b: Linear,
    pub filters: usize,
    pub periods: usize,
    pub horizon: usize,
}

/// Length of the pooled feature vector for a window of `n` steps.
pub fn feature_len(filters: usize, n: usize) -> usize {
    filters * (n / 2)
}

impl LwiParams {
    pub fn new(b: &mut Builder, name: &str, filters: usize, longest: usize, periods: usize, horizon: usize) -> Self {
        let nu = feature_len(filters, longest);
        LwiParams {
            conv: b.param(&alloc::format!("{name}.conv.weight"), &[filters, 1, KERNEL], Init::fan_in(KERNEL)),
            norm: BatchNorm::new(b, &alloc::format!("{name}.norm"), filters),
            gate_a: Linear::new(b, &alloc::format!("{name}.theta1"), nu, periods * horizon, true),
            gate_b: Linear::new(b, &alloc::format!("{name}.theta2"), nu, periods * horizon, true),
            filters,
            periods,
            horizon,
        }
    }

    /// `[B, n] -> [B, F * floor(n / 2)]`: pad, conv, batch norm over
    /// filters, max pool, flatten.
    pub fn extract_features(&self, ctx: &mut Ctx, window: Var) -> Result<Var> {
        let shape = ctx.tape.shape(window).to_vec();
        let (b, n) = match *shape.as_slice() {
            [b, n] => (b, n),
            _ => return Err(MlfError::invalid("extract_features", &shape, "expected [batch, steps]")),
        };
        if n < 2 {
            return Err(MlfError::DegenerateInput(alloc::format!(
                "longest window has {n} steps, need at least 2"
            )));
        }
        let f = self.filters;
        let x = ctx.tape.reshape(window, &[b, 1, n])?;
        let c = ctx.tape.conv1d(x, ctx.p(self.conv), KERNEL / 2)?;
        let c = ctx.tape.permute(c, &[0, 2, 1])?;
        let c = self.norm.forward_last_axis(ctx, c)?;
        let c = ctx.tape.permute(c, &[0, 2, 1])?;
        let pooled = ctx.tape.max_pool2(c)?;
        ctx.tape.reshape(pooled, &[b, f * (n / 2)])
    }

    /// `sigmoid(tanh(nu A + a) * tanh(nu B + b))` reshaped to `[B, S, m]`.
    pub fn period_weights(&self, ctx: &mut Ctx, nu: Var) -> Result<Var> {
        let shape = ctx.tape.shape(nu).to_vec();
        if shape.len() != 2 || shape[1] != self.gate_a.fan_in {
            return Err(MlfError::mismatch("period_weights", &shape, &[self.gate_a.fan_in]));
        }
        let a = self.gate_a.forward(ctx, nu)?;
        let a = ctx.tape.tanh(a)?;
        let g = self.gate_b.forward(ctx, nu)?;
        let g = ctx.tape.tanh(g)?;
        let p = ctx.tape.mul(a, g)?;
        let att = ctx.tape.sigmoid(p)?;
        ctx.tape.reshape(att, &[shape[0], self.periods, self.horizon])
    }
}

/// `(1/S) sum_s forecast_s * att[:, s, :]`; plain mean when `att` is absent.
/// Forecasts are `[B, m]`, `att` is `[B, S, m]`.
pub fn integrate(tape: &mut Tape, forecasts: &[Var], att: Option<Var>) -> Result<Var> {
    let s = forecasts.len();
    if s == 0 {
        return Err(MlfError::DegenerateInput("no period forecasts".into()));
    }
    let weighted: Vec<Var> = match att {
        None => forecasts.to_vec(),
        Some(att) => {
            let a_shape = tape.shape(att).to_vec();
            if a_shape.len() != 3 || a_shape[1] != s {
                return Err(MlfError::mismatch("integrate", &a_shape, &[s]));
            }
            let rows = tape.split(att, 1, s)?;
            forecasts
                .iter()
                .zip(rows)
                .map(|(&f, row)| {
                    let fs = tape.shape(f).to_vec();
                    let row = tape.reshape(row, &fs)?;
                    tape.mul(f, row)
                })
                .collect::<Result<_>>()?
        }
    };
    let mut acc = weighted[0];
    for &w in &weighted[1..] {
        acc = tape.add(acc, w)?;
    }
    if s == 1 {
        Ok(acc)
    } else {
        tape.scale(acc, 1.0 / s as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::math;
    use crate::nn::{bind, Mode, ParamStore};
    use crate::tensor::Tensor;
    use alloc::vec;

    fn build(f: usize, n: usize, s: usize, m: usize) -> (LwiParams, ParamStore, ParamStore) {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let lwi = LwiParams::new(
            &mut Builder {
                params: &mut params,
                buffers: &mut buffers,
                seed: 4,
            },
            "lwi",
            f,
            n,
            s,
            m,
        );
        (lwi, params, buffers)
    }

    fn ctx<'a>(tape: &'a mut Tape, vars: &'a [Var], buffers: &'a ParamStore, mode: Mode) -> Ctx<'a> {
        Ctx {
            tape,
            params: vars,
            buffers,
            mode,
            bn_updates: Vec::new(),
        }
    }

    fn window(b: usize, n: usize) -> Tensor {
        Tensor::new(&[b, n], (0..b * n).map(|i| math::sin(i as f64 * 0.7) + 0.1 * i as f64).collect()).unwrap()
    }

    #[test]
    fn feature_length() {
        for n in [2, 7, 16, 33] {
            let (lwi, params, buffers) = build(16, n, 2, 3);
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &params, false);
            let x = tape.constant(window(3, n));
            let mut c = ctx(&mut tape, &vars, &buffers, Mode::Train);
            let nu = lwi.extract_features(&mut c, x).unwrap();
            assert_eq!(c.tape.shape(nu), &[3, 16 * (n / 2)]);
        }
        let (lwi, params, buffers) = build(4, 2, 1, 1);
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params, false);
        let x = tape.constant(window(1, 1));
        let mut c = ctx(&mut tape, &vars, &buffers, Mode::Train);
        assert!(matches!(lwi.extract_features(&mut c, x), Err(MlfError::DegenerateInput(_))));
    }

    #[test]
    fn zero_conv_gives_half_weights() {
        let (lwi, mut params, buffers) = build(16, 10, 3, 4);
        *params.get_mut(lwi.conv) = Tensor::zeros(&[16, 1, 3]);
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params, false);
        let x = tape.constant(window(2, 10));
        let mut c = ctx(&mut tape, &vars, &buffers, Mode::Eval);
        let nu = lwi.extract_features(&mut c, x).unwrap();
        assert!(c.tape.value(nu).data().iter().all(|&v| v == 0.0));

        for e in params.iter_mut() {
            if e.name.contains("theta") {
                e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params, false);
        let x = tape.constant(window(2, 10));
        let mut c = ctx(&mut tape, &vars, &buffers, Mode::Eval);
        let nu = lwi.extract_features(&mut c, x).unwrap();
        let att = lwi.period_weights(&mut c, nu).unwrap();
        assert_eq!(c.tape.shape(att), &[2, 3, 4]);
        assert!(c.tape.value(att).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn weights_stay_in_gated_range() {
        let (lwi, mut params, buffers) = build(8, 12, 2, 3);
        // large weights push the gates toward saturation
        for e in params.iter_mut() {
            if e.name.contains("theta") {
                e.value.data_mut().iter_mut().for_each(|v| *v *= 50.0);
            }
        }
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params, false);
        let x = tape.constant(window(4, 12));
        let mut c = ctx(&mut tape, &vars, &buffers, Mode::Train);
        let nu = lwi.extract_features(&mut c, x).unwrap();
        let att = lwi.period_weights(&mut c, nu).unwrap();
        // saturated gates can round to exactly sigmoid(+-1), which still
        // clears the four-digit bounds
        assert!(math::sigmoid(-1.0) > 0.2689 && math::sigmoid(1.0) < 0.7311);
        let (lo, hi) = (0.2689, 0.7311);
        for &v in c.tape.value(att).data() {
            assert!(v > lo && v < hi, "{v}");
        }
    }

    #[test]
    fn integrate_cases() {
        let mut tape = Tape::new();
        let two = tape.constant(Tensor::full(&[1, 1], 2.0));
        let four = tape.constant(Tensor::full(&[1, 1], 4.0));
        let ones = tape.constant(Tensor::new(&[1, 2, 1], vec![1.0, 1.0]).unwrap());
        let y = integrate(&mut tape, &[two, four], Some(ones)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
        let zero_one = tape.constant(Tensor::new(&[1, 2, 1], vec![0.0, 1.0]).unwrap());
        let y = integrate(&mut tape, &[two, four], Some(zero_one)).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
        let half = tape.constant(Tensor::full(&[1, 2, 1], 0.5));
        let y = integrate(&mut tape, &[two, four], Some(half)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5]);
        let y = integrate(&mut tape, &[two, four], None).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
        assert!(integrate(&mut tape, &[two], Some(ones)).is_err());
    }

    #[test]
    fn integrate_is_linear_in_forecasts() {
        let mut tape = Tape::new();
        let att = tape.constant(Tensor::new(&[1, 2, 2], vec![0.3, 0.6, 0.45, 0.7]).unwrap());
        let a = [tape.constant(Tensor::from_slice(&[1.0, -2.0]).unwrap().reshape(&[1, 2]).unwrap()), tape.constant(Tensor::new(&[1, 2], vec![0.5, 3.0]).unwrap())];
        let b = [tape.constant(Tensor::new(&[1, 2], vec![-4.0, 1.0]).unwrap()), tape.constant(Tensor::new(&[1, 2], vec![2.0, 2.5]).unwrap())];
        let ab: Vec<Var> = a
            .iter()
            .zip(&b)
            .map(|(&x, &y)| {
                let y3 = tape.scale(y, 3.0).unwrap();
                tape.add(x, y3).unwrap()
            })
            .collect();
        let ya = integrate(&mut tape, &a, Some(att)).unwrap();
        let yb = integrate(&mut tape, &b, Some(att)).unwrap();
        let yab = integrate(&mut tape, &ab, Some(att)).unwrap();
        for i in 0..2 {
            let want = tape.value(ya).data()[i] + 3.0 * tape.value(yb).data()[i];
            assert!((tape.value(yab).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_gradient() {
        let (lwi, params, buffers) = build(2, 6, 2, 2);
        let point: Vec<Tensor> = params.iter().map(|e| e.value.clone()).chain([window(3, 6)]).collect();
        let rep = grad_check(
            |tape, xs| {
                let (ps, x) = xs.split_at(xs.len() - 1);
                let mut c = ctx(tape, ps, &buffers, Mode::Train);
                let nu = lwi.extract_features(&mut c, x[0])?;
                let att = lwi.period_weights(&mut c, nu)?;
                let w = c.tape.constant(Tensor::new(&[3, 2, 2], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect())?);
                let p = c.tape.mul(att, w)?;
                c.tape.sum(p)
            },
            &point,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
