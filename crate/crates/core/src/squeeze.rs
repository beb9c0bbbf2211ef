//! Patch squeeze: a shared linear map along the patch axis compresses each
//! period's patch embeddings by a factor `r`; per-period decoders map the
//! squeezed tokens back to raw patches for the auxiliary reconstruction loss.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{MlfError, Result};
use crate::nn::{Builder, Ctx, Decoder, DecoderKind, Linear};

/// Compression along the patch axis, `[B, N, D] -> [B, N_out, D]`.
#[derive(Debug, Clone, Copy)]
pub struct PatchEnc {
    pub linear: Linear,
}

impl PatchEnc {
    pub fn new(b: &mut Builder, name: &str, num_patches: usize, tokens: usize) -> Self {
        PatchEnc {
            linear: Linear::new(b, name, num_patches, tokens, true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.linear.fan_in {
            return Err(MlfError::mismatch("squeeze", &s, &[self.linear.fan_in, self.linear.fan_out]));
        }
        let t = ctx.tape.permute(x, &[0, 2, 1])?;
        let y = self.linear.forward(ctx, t)?;
        ctx.tape.permute(y, &[0, 2, 1])
    }
}

/// Token count after squeezing `num_patches` by `factor`.
pub fn squeezed_tokens(num_patches: usize, factor: usize) -> Result<usize> {
    if factor == 0 || !num_patches.is_multiple_of(factor) {
        return Err(MlfError::config(
            "squeeze_factor",
            alloc::format!("{factor} does not divide the patch count {num_patches}"),
        ));
    }
    Ok(num_patches / factor)
}

/// Joins per-period token blocks, shortest period first, along the token axis.
pub fn concat_periods(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let first = match parts.first() {
        Some(&p) => tape.shape(p).to_vec(),
        None => return Err(MlfError::DegenerateInput("no periods to concatenate".into())),
    };
    for &p in &parts[1..] {
        if tape.shape(p) != first.as_slice() {
            return Err(MlfError::mismatch("concat_periods", &first, tape.shape(p)));
        }
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(parts, 1)
}

/// Per-period decoder: tokens back to patch count, then embedding width
/// back to patch length.
#[derive(Debug, Clone, Copy)]
pub struct Reconstructor {
    pub tokens_to_patches: Decoder,
    pub embedding_to_patch: Decoder,
}

impl Reconstructor {
    pub fn new(
        b: &mut Builder,
        name: &str,
        kind: DecoderKind,
        tokens: usize,
        num_patches: usize,
        d_model: usize,
        patch_len: usize,
    ) -> Self {
        Reconstructor {
            tokens_to_patches: Decoder::new(b, &alloc::format!("{name}.mlp_n"), kind, tokens, num_patches),
            embedding_to_patch: Decoder::new(b, &alloc::format!("{name}.mlp_l"), kind, d_model, patch_len),
        }
    }

    /// `[B, T, D] -> [B, N, L]`.
    pub fn forward(&self, ctx: &mut Ctx, squeezed: Var) -> Result<Var> {
        let t = ctx.tape.permute(squeezed, &[0, 2, 1])?;
        let n = self.tokens_to_patches.forward(ctx, t)?;
        let n = ctx.tape.permute(n, &[0, 2, 1])?;
        self.embedding_to_patch.forward(ctx, n)
    }
}

/// Mean over periods of the per-period reconstruction MSE.
pub fn reconstruction_loss(tape: &mut Tape, recon: &[Var], raw: &[Var]) -> Result<Var> {
    if recon.len() != raw.len() || recon.is_empty() {
        return Err(MlfError::mismatch("reconstruction_loss", &[recon.len()], &[raw.len()]));
    }
    let terms: Vec<Var> = recon
        .iter()
        .zip(raw)
        .map(|(&r, &x)| tape.mse(r, x))
        .collect::<Result<_>>()?;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / terms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bind, Mode, ParamStore};
    use crate::optim::Adam;
    use crate::tensor::Tensor;

    fn ctx<'a>(tape: &'a mut Tape, vars: &'a [Var], buffers: &'a ParamStore) -> Ctx<'a> {
        Ctx {
            tape,
            params: vars,
            buffers,
            mode: Mode::Train,
            bn_updates: Vec::new(),
        }
    }

    #[test]
    fn token_counts() {
        assert_eq!(squeezed_tokens(64, 8).unwrap(), 8);
        assert_eq!(squeezed_tokens(64, 1).unwrap(), 64);
        assert!(squeezed_tokens(64, 3).is_err());
    }

    #[test]
    fn identity_encoder_passes_through() {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let enc = PatchEnc::new(
            &mut Builder {
                params: &mut params,
                buffers: &mut buffers,
                seed: 1,
            },
            "enc",
            4,
            4,
        );
        *params.get_mut(enc.linear.weight) = Tensor::eye(4);
        *params.get_mut(enc.linear.bias.unwrap()) = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params, false);
        let x_val = Tensor::new(&[2, 4, 3], (0..24).map(|v| v as f64 - 7.5).collect()).unwrap();
        let x = tape.constant(x_val.clone());
        let mut c = ctx(&mut tape, &vars, &buffers);
        let y = enc.forward(&mut c, x).unwrap();
        assert_eq!(c.tape.value(y), &x_val);
    }

    #[test]
    fn zero_input_gives_bias_broadcast() {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let enc = PatchEnc::new(
            &mut Builder {
                params: &mut params,
                buffers: &mut buffers,
                seed: 1,
            },
            "enc",
            8,
            2,
        );
        let bias = params.get(enc.linear.bias.unwrap()).clone();
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params, false);
        let x = tape.constant(Tensor::zeros(&[1, 8, 3]));
        let mut c = ctx(&mut tape, &vars, &buffers);
        let y = enc.forward(&mut c, x).unwrap();
        let v = c.tape.value(y);
        assert_eq!(v.shape(), &[1, 2, 3]);
        for t in 0..2 {
            for d in 0..3 {
                assert_eq!(v.at(&[0, t, d]), bias.data()[t]);
            }
        }
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3, 4], 1.0));
        let b = tape.constant(Tensor::full(&[2, 3, 4], 2.0));
        let c = concat_periods(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[2, 6, 4]);
        let parts = tape.split(c, 1, 2).unwrap();
        assert_eq!(tape.value(parts[0]), tape.value(a));
        assert_eq!(tape.value(parts[1]), tape.value(b));
        assert_eq!(concat_periods(&mut tape, &[a]).unwrap(), a);
        let bad = tape.constant(Tensor::full(&[2, 2, 4], 1.0));
        assert!(concat_periods(&mut tape, &[a, bad]).is_err());
    }

    #[test]
    fn reconstruction_loss_is_period_mean() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let r1 = tape.constant(Tensor::full(&[1, 2], 2f64.sqrt()));
        let r2 = tape.constant(Tensor::full(&[1, 2], 2.0));
        let l = reconstruction_loss(&mut tape, &[r1, r2], &[z, z]).unwrap();
        assert!((tape.value(l).item() - 3.0).abs() < 1e-12);
        let l = reconstruction_loss(&mut tape, &[z], &[z]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(reconstruction_loss(&mut tape, &[z], &[z, z]).is_err());
    }

    #[test]
    fn reconstructor_output_shape() {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let rec = Reconstructor::new(
            &mut Builder {
                params: &mut params,
                buffers: &mut buffers,
                seed: 2,
            },
            "rec",
            DecoderKind::Mlp,
            2,
            8,
            4,
            6,
        );
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params, true);
        let x = tape.constant(Tensor::full(&[3, 2, 4], 0.5));
        let mut c = ctx(&mut tape, &vars, &buffers);
        let y = rec.forward(&mut c, x).unwrap();
        assert_eq!(c.tape.shape(y), &[3, 8, 6]);
    }

    /// r = 1 with linear decoders can fit one fixed input to near zero error.
    #[test]
    fn linear_decoders_overfit_single_input() {
        let (n, l, d) = (4, 2, 4);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            buffers: &mut buffers,
            seed: 11,
        };
        let enc = PatchEnc::new(&mut b, "enc", n, n);
        let proj = b.param("proj", &[l, d], crate::nn::Init::fan_in(l));
        let rec = Reconstructor::new(&mut b, "rec", DecoderKind::Linear, n, n, d, l);
        let raw = crate::patching::patchify(&[0.3, -0.8, 1.1, 0.4, -0.2], l, 1).unwrap();
        let raw = Tensor::new(&[1, n, l], raw.data()[..n * l].to_vec()).unwrap();
        let mut opt = Adam::new(1e-2, params.iter().map(|e| e.value.len()));
        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &params, true);
            let x = tape.constant(raw.clone());
            let mut c = ctx(&mut tape, &vars, &buffers);
            let pv = c.p(proj);
            let flat = c.tape.reshape(x, &[n, l]).unwrap();
            let e = c.tape.matmul(flat, pv).unwrap();
            let e = c.tape.reshape(e, &[1, n, d]).unwrap();
            let s = enc.forward(&mut c, e).unwrap();
            let r = rec.forward(&mut c, s).unwrap();
            let loss = reconstruction_loss(c.tape, &[r], &[x]).unwrap();
            last = c.tape.value(loss).item();
            tape.backward(loss).unwrap();
            let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
            opt.step(&mut params, &grads);
        }
        assert!(last < 1e-4, "reconstruction mse {last}");
    }
}
