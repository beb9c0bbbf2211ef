//! Full model: configuration, parameter layout, forward pass, loss and one
//! optimisation step.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{check_periods, Batch};
use crate::encoder::{aggregate_block_forecasts, BlockSwitches, EncoderBlock};
use crate::error::{MlfError, Result};
use crate::lwi::{integrate, LwiParams};
use crate::nn::{apply_bn_updates, bind, Builder, Ctx, DecoderKind, Init, Mode, ParamId, ParamStore};
use crate::optim::{clip_global_norm, Adam};
use crate::patching::{derive_patch_params, embed, fixed_patch_params, patch_batch, PatchParams};
use crate::squeeze::{concat_periods, reconstruction_loss, squeezed_tokens, PatchEnc, Reconstructor};
use crate::tensor::Tensor;

/// Component switches; `true` means the component is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub irf: bool,
    pub lwi: bool,
    pub map: bool,
    pub reconstruction_loss: bool,
    #[serde(alias = "ma")]
    pub attention: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            irf: true,
            lwi: true,
            map: true,
            reconstruction_loss: true,
            attention: true,
        }
    }
}

impl Ablation {
    pub const FLAGS: [&'static str; 5] = ["irf", "lwi", "map", "ma", "reconstruction_loss"];

    /// Turns off one component by its flag name.
    pub fn disable(&mut self, flag: &str) -> Result<()> {
        match flag {
            "irf" => self.irf = false,
            "lwi" => self.lwi = false,
            "map" => self.map = false,
            "ma" | "attention" => self.attention = false,
            "reconstruction_loss" | "recon" => self.reconstruction_loss = false,
            other => {
                return Err(MlfError::config(
                    "ablation",
                    alloc::format!("unknown flag '{other}', expected one of {:?}", Self::FLAGS),
                ))
            }
        }
        Ok(())
    }
}

fn d_num_patches() -> usize {
    64
}
fn d_squeeze() -> usize {
    8
}
fn d_model() -> usize {
    128
}
fn d_heads() -> usize {
    4
}
fn d_blocks() -> usize {
    3
}
fn d_filters() -> usize {
    16
}
fn d_alpha() -> usize {
    2
}
fn d_lr() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    128
}
fn d_epochs() -> usize {
    30
}
fn d_fixed_len() -> usize {
    16
}
fn d_fixed_stride() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlfConfig {
    /// Window lengths, shortest first.
    pub period_lengths: Vec<usize>,
    /// Forecast horizon `m`.
    pub horizon: usize,
    #[serde(default = "d_num_patches")]
    pub num_patches: usize,
    #[serde(default = "d_squeeze")]
    pub squeeze_factor: usize,
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_blocks")]
    pub n_blocks: usize,
    /// Feed-forward width; `2 * d_model` when absent.
    #[serde(default)]
    pub d_ff: Option<usize>,
    #[serde(default = "d_filters")]
    pub lwi_filters: usize,
    /// Patch length over stride.
    #[serde(default = "d_alpha")]
    pub patch_ratio: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub decoder: DecoderKind,
    /// Global gradient-norm clipping threshold.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Patch length used when adaptive patching is off.
    #[serde(default = "d_fixed_len")]
    pub fixed_patch_len: usize,
    #[serde(default = "d_fixed_stride")]
    pub fixed_stride: usize,
    #[serde(default)]
    pub ablation: Ablation,
}

impl MlfConfig {
    pub fn new(period_lengths: Vec<usize>, horizon: usize) -> Self {
        MlfConfig {
            period_lengths,
            horizon,
            num_patches: d_num_patches(),
            squeeze_factor: d_squeeze(),
            d_model: d_model(),
            n_heads: d_heads(),
            n_blocks: d_blocks(),
            d_ff: None,
            lwi_filters: d_filters(),
            patch_ratio: d_alpha(),
            learning_rate: d_lr(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            decoder: DecoderKind::default(),
            grad_clip: None,
            fixed_patch_len: d_fixed_len(),
            fixed_stride: d_fixed_stride(),
            ablation: Ablation::default(),
        }
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(2 * self.d_model)
    }

    pub fn num_periods(&self) -> usize {
        self.period_lengths.len()
    }

    pub fn longest(&self) -> usize {
        self.period_lengths.last().copied().unwrap_or(0)
    }

    /// Squeezed tokens per period.
    pub fn tokens_per_period(&self) -> Result<usize> {
        squeezed_tokens(self.num_patches, self.squeeze_factor)
    }

    /// Attention sequence length.
    pub fn total_tokens(&self) -> Result<usize> {
        Ok(self.tokens_per_period()? * self.num_periods())
    }

    pub fn patch_params(&self) -> Vec<PatchParams> {
        self.period_lengths
            .iter()
            .enumerate()
            .map(|(s, &n)| {
                if self.ablation.map {
                    derive_patch_params(s, n, self.num_patches, self.patch_ratio)
                } else {
                    fixed_patch_params(s, n, self.fixed_patch_len, self.fixed_stride)
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_periods(&self.period_lengths)?;
        let positive = [
            ("horizon", self.horizon),
            ("num_patches", self.num_patches),
            ("squeeze_factor", self.squeeze_factor),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("d_ff", self.d_ff()),
            ("lwi_filters", self.lwi_filters),
            ("patch_ratio", self.patch_ratio),
            ("batch_size", self.batch_size),
            ("fixed_patch_len", self.fixed_patch_len),
            ("fixed_stride", self.fixed_stride),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(MlfError::config(field, "must be positive"));
            }
        }
        self.tokens_per_period()?;
        if self.num_patches + self.patch_ratio < 3 {
            return Err(MlfError::config("patch_ratio", "a single patch needs patch_ratio >= 2"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(MlfError::config(
                "n_heads",
                alloc::format!("must divide d_model {}", self.d_model),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(MlfError::config("learning_rate", "must be finite and non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(MlfError::config("grad_clip", "must be finite and positive"));
            }
        }
        if self.ablation.lwi && self.longest() < 2 {
            return Err(MlfError::config("period_lengths", "longest period must have at least 2 steps"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct PeriodLayout {
    patch: PatchParams,
    projection: ParamId,
    position: ParamId,
    /// Per-period compression, only without adaptive patching.
    squeeze: Option<PatchEnc>,
    reconstructor: Option<Reconstructor>,
}

#[derive(Debug, Clone)]
struct Layout {
    periods: Vec<PeriodLayout>,
    shared_squeeze: Option<PatchEnc>,
    blocks: Vec<EncoderBlock>,
    lwi: Option<LwiParams>,
}

impl Layout {
    fn build(config: &MlfConfig, b: &mut Builder) -> Result<Self> {
        let d = config.d_model;
        let tokens = config.tokens_per_period()?;
        let patches = config.patch_params();
        let shared_squeeze = config
            .ablation
            .map
            .then(|| PatchEnc::new(b, "squeeze", config.num_patches, tokens));
        let periods = patches
            .into_iter()
            .enumerate()
            .map(|(s, patch)| {
                let name = |x: &str| alloc::format!("period{s}.{x}");
                PeriodLayout {
                    patch,
                    projection: b.param(&name("projection"), &[patch.patch_len, d], Init::fan_in(patch.patch_len)),
                    position: b.param(&name("position"), &[patch.num_patches, d], Init::Normal(0.02)),
                    squeeze: (!config.ablation.map).then(|| PatchEnc::new(b, &name("squeeze"), patch.num_patches, tokens)),
                    reconstructor: config.ablation.reconstruction_loss.then(|| {
                        Reconstructor::new(
                            b,
                            &name("reconstruct"),
                            config.decoder,
                            tokens,
                            patch.num_patches,
                            d,
                            patch.patch_len,
                        )
                    }),
                }
            })
            .collect();
        let blocks = (0..config.n_blocks)
            .map(|e| {
                EncoderBlock::new(
                    b,
                    &alloc::format!("block{e}"),
                    d,
                    config.n_heads,
                    config.d_ff(),
                    config.num_periods(),
                    tokens,
                    config.horizon,
                )
            })
            .collect();
        let lwi = config.ablation.lwi.then(|| {
            LwiParams::new(
                b,
                "lwi",
                config.lwi_filters,
                config.longest(),
                config.num_periods(),
                config.horizon,
            )
        });
        Ok(Layout {
            periods,
            shared_squeeze,
            blocks,
            lwi,
        })
    }
}

/// Every intermediate product of one forward pass.
#[derive(Debug, Clone)]
pub struct ForecastBundle {
    /// `block_forecasts[e][s]`, each `[B, m]`.
    pub block_forecasts: Vec<Vec<Var>>,
    /// Block-averaged forecast per period, `[B, m]`.
    pub period_forecasts: Vec<Var>,
    /// Integration weights `[B, S, m]`.
    pub att: Option<Var>,
    /// Integrated forecast `[B, m]`.
    pub forecast: Var,
    /// Reconstructed patches per period `[B, N_s, L_s]`.
    pub reconstructions: Vec<Var>,
    /// Input patches per period `[B, N_s, L_s]`.
    pub raw_patches: Vec<Var>,
    /// Attention probabilities per block `[B * H, T, T]`.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub forecast: Var,
    pub reconstruction: Option<Var>,
}

/// Scalar summary of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub forecast_loss: f64,
    pub reconstruction_loss: Option<f64>,
    pub grad_norm: f64,
}

/// Detached outputs of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[B, m]`
    pub forecast: Tensor,
    pub period_forecasts: Vec<Tensor>,
    pub att: Option<Tensor>,
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct MlfModel {
    pub config: MlfConfig,
    pub params: ParamStore,
    /// Batch-norm running statistics.
    pub buffers: ParamStore,
    layout: Layout,
}

impl MlfModel {
    pub fn new(config: MlfConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let layout = Layout::build(
            &config,
            &mut Builder {
                params: &mut params,
                buffers: &mut buffers,
                seed,
            },
        )?;
        Ok(MlfModel {
            config,
            params,
            buffers,
            layout,
        })
    }

    /// Rebuilds the layout for `config` and loads stored tensors into it.
    pub fn from_parts(config: MlfConfig, params: &ParamStore, buffers: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        model.buffers.load_from(buffers)?;
        Ok(model)
    }

    pub fn patch_params(&self) -> Vec<PatchParams> {
        self.layout.periods.iter().map(|p| p.patch).collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.size == 0 {
            return Err(MlfError::DegenerateInput("empty batch".into()));
        }
        if batch.windows.len() != self.config.num_periods() {
            return Err(MlfError::mismatch(
                "forward",
                &[batch.windows.len()],
                &[self.config.num_periods()],
            ));
        }
        for (w, &n) in batch.windows.iter().zip(&self.config.period_lengths) {
            if w.len() != batch.size * n {
                return Err(MlfError::mismatch("forward", &[w.len()], &[batch.size, n]));
            }
        }
        Ok(())
    }

    /// Runs the pipeline on `ctx`, whose parameter vars were bound from
    /// `self.params` (in order).
    pub fn forward(&self, ctx: &mut Ctx, batch: &Batch) -> Result<ForecastBundle> {
        self.check_batch(batch)?;
        let b = batch.size;
        let mut squeezed = Vec::with_capacity(self.layout.periods.len());
        let mut raw_patches = Vec::with_capacity(self.layout.periods.len());
        let mut reconstructions = Vec::new();
        for (period, windows) in self.layout.periods.iter().zip(&batch.windows) {
            let patches = patch_batch(windows, b, &period.patch)?;
            let patches = ctx.tape.constant(patches);
            let e = embed(ctx.tape, patches, ctx.p(period.projection), ctx.p(period.position))?;
            let enc = period
                .squeeze
                .as_ref()
                .or(self.layout.shared_squeeze.as_ref())
                .ok_or_else(|| MlfError::config("ablation", "no squeeze encoder for period"))?;
            let z = enc.forward(ctx, e)?;
            if let Some(rec) = &period.reconstructor {
                reconstructions.push(rec.forward(ctx, z)?);
            }
            squeezed.push(z);
            raw_patches.push(patches);
        }

        let switches = BlockSwitches {
            attention: self.config.ablation.attention,
            irf: self.config.ablation.irf,
        };
        let mut x = concat_periods(ctx.tape, &squeezed)?;
        let mut block_forecasts = Vec::with_capacity(self.layout.blocks.len());
        let mut attention = Vec::new();
        for block in &self.layout.blocks {
            let out = block.forward(ctx, x, switches)?;
            x = out.next;
            block_forecasts.push(out.forecasts);
            attention.extend(out.scores);
        }
        let period_forecasts = aggregate_block_forecasts(ctx.tape, &block_forecasts)?;

        let att = match &self.layout.lwi {
            Some(lwi) => {
                let longest = batch.windows.last().expect("checked above");
                let w = ctx.tape.constant(Tensor::new(&[b, self.config.longest()], longest.clone())?);
                let nu = lwi.extract_features(ctx, w)?;
                Some(lwi.period_weights(ctx, nu)?)
            }
            None => None,
        };
        let forecast = integrate(ctx.tape, &period_forecasts, att)?;
        Ok(ForecastBundle {
            block_forecasts,
            period_forecasts,
            att,
            forecast,
            reconstructions,
            raw_patches,
            attention,
        })
    }

    /// Forecast MSE plus, when enabled, the mean per-period reconstruction
    /// MSE.
    pub fn loss(&self, tape: &mut Tape, bundle: &ForecastBundle, target: Var) -> Result<LossParts> {
        mlf_loss(tape, bundle, target, self.config.ablation.reconstruction_loss)
    }

    fn target(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let m = self.config.horizon;
        if batch.target.len() != batch.size * m {
            return Err(MlfError::mismatch("target", &[batch.target.len()], &[batch.size, m]));
        }
        Ok(tape.constant(Tensor::new(&[batch.size, m], batch.target.clone())?))
    }

    /// Gradients of the training loss for every parameter, in store order.
    pub fn gradients(&self, batch: &Batch) -> Result<(Vec<Vec<f64>>, LossValues, Vec<BnUpdate>)> {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &self.params, true);
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &vars,
            buffers: &self.buffers,
            mode: Mode::Train,
            bn_updates: Vec::new(),
        };
        let bundle = self.forward(&mut ctx, batch)?;
        let updates = core::mem::take(&mut ctx.bn_updates);
        let target = self.target(&mut tape, batch)?;
        let parts = self.loss(&mut tape, &bundle, target)?;
        let values = LossValues::read(&tape, &parts);
        if !values.total.is_finite() {
            return Err(MlfError::NonFinite { op: "loss" });
        }
        tape.backward(parts.total)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        Ok((grads, values, updates))
    }

    /// One Adam step on `batch`; `step` is only used to label divergence.
    pub fn train_step(&mut self, opt: &mut Adam, batch: &Batch, step: usize) -> Result<StepStats> {
        let (mut grads, values, updates) = match self.gradients(batch) {
            Ok(r) => r,
            Err(MlfError::NonFinite { .. }) => return Err(MlfError::Diverged { step }),
            Err(e) => return Err(e),
        };
        let grad_norm = match self.config.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => crate::optim::global_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(MlfError::Diverged { step });
        }
        opt.step(&mut self.params, &grads);
        apply_bn_updates(&mut self.buffers, &updates);
        Ok(StepStats {
            loss: values.total,
            forecast_loss: values.forecast,
            reconstruction_loss: values.reconstruction,
            grad_norm,
        })
    }

    /// Loss with running batch-norm statistics and no parameter update.
    pub fn eval_loss(&self, batch: &Batch) -> Result<LossValues> {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &self.params, false);
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &vars,
            buffers: &self.buffers,
            mode: Mode::Eval,
            bn_updates: Vec::new(),
        };
        let bundle = self.forward(&mut ctx, batch)?;
        let target = self.target(&mut tape, batch)?;
        let parts = self.loss(&mut tape, &bundle, target)?;
        Ok(LossValues::read(&tape, &parts))
    }

    /// Inference with running batch-norm statistics; targets are ignored.
    pub fn predict(&self, batch: &Batch) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &self.params, false);
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &vars,
            buffers: &self.buffers,
            mode: Mode::Eval,
            bn_updates: Vec::new(),
        };
        let bundle = self.forward(&mut ctx, batch)?;
        let get = |v: Var| tape.value(v).clone();
        Ok(Prediction {
            forecast: get(bundle.forecast),
            period_forecasts: bundle.period_forecasts.iter().map(|&v| get(v)).collect(),
            att: bundle.att.map(get),
            attention: bundle.attention.iter().map(|&v| get(v)).collect(),
        })
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|e| e.name.as_str())
    }

    pub fn describe(&self) -> String {
        alloc::format!(
            "{} periods {:?}, {} tokens, {} blocks, {} parameters",
            self.config.num_periods(),
            self.config.period_lengths,
            self.config.total_tokens().unwrap_or(0),
            self.config.n_blocks,
            self.params.num_scalars()
        )
    }
}

pub type BnUpdate = (ParamId, ParamId, crate::autodiff::BatchStats);

/// Scalar values of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub forecast: f64,
    pub reconstruction: Option<f64>,
}

impl LossValues {
    pub fn read(tape: &Tape, parts: &LossParts) -> Self {
        LossValues {
            total: tape.value(parts.total).item(),
            forecast: tape.value(parts.forecast).item(),
            reconstruction: parts.reconstruction.map(|r| tape.value(r).item()),
        }
    }
}

/// `MSE(forecast, target) + mean_s MSE(reconstruction_s, patches_s)`.
pub fn mlf_loss(tape: &mut Tape, bundle: &ForecastBundle, target: Var, with_reconstruction: bool) -> Result<LossParts> {
    let forecast = tape.mse(bundle.forecast, target)?;
    if !with_reconstruction || bundle.reconstructions.is_empty() {
        return Ok(LossParts {
            total: forecast,
            forecast,
            reconstruction: None,
        });
    }
    let rec = reconstruction_loss(tape, &bundle.reconstructions, &bundle.raw_patches)?;
    let total = tape.add(forecast, rec)?;
    Ok(LossParts {
        total,
        forecast,
        reconstruction: Some(rec),
    })
}
