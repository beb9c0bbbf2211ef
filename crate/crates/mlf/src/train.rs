//! Data preparation and the epoch loop.

use std::time::Instant;

use mlf_core::data::{gather_batch, sample_windows, split_dataset, SeriesDataset, Split, Splits, Standardizer, WindowIndex};
use mlf_core::nn::param_rng;
use mlf_core::optim::Adam;
use mlf_core::{MlfConfig, MlfModel};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig, TrainOptions};
use crate::csvio::load_csv;
use crate::error::Result;
use crate::synth::generate;

/// A loaded, split and standardised dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub raw: SeriesDataset,
    pub data: SeriesDataset,
    pub standardizer: Standardizer,
    pub splits: Splits,
}

pub fn load_source(source: &DataSource) -> Result<SeriesDataset> {
    match source {
        DataSource::Csv { path } => load_csv(path),
        DataSource::Synth(spec) => generate(spec),
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    prepare_dataset(load_source(&cfg.data)?, cfg)
}

pub fn prepare_dataset(raw: SeriesDataset, cfg: &RunConfig) -> Result<Prepared> {
    let splits = split_dataset(raw.len(), cfg.split, cfg.model.longest(), cfg.model.horizon)?;
    let standardizer = Standardizer::fit(&raw, 0..splits.train.end)?;
    let data = standardizer.transform(&raw)?;
    Ok(Prepared {
        raw,
        data,
        standardizer,
        splits,
    })
}

impl Prepared {
    pub fn windows(&self, split: Split, model: &MlfConfig) -> Vec<WindowIndex> {
        sample_windows(&self.data, self.splits.get(split), &model.period_lengths, model.horizon)
    }

    /// Evaluation windows, thinned to an evenly spaced subset when capped.
    pub fn eval_windows(&self, split: Split, model: &MlfConfig, opts: &TrainOptions) -> Vec<WindowIndex> {
        let all = self.windows(split, model);
        match opts.max_eval_windows {
            Some(cap) if cap < all.len() && cap > 0 => (0..cap).map(|i| all[i * all.len() / cap]).collect(),
            _ => all,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_forecast_loss: f64,
    /// Forecast MSE on the validation windows, normalised units.
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss (the last
    /// epoch when there is no validation data).
    pub best: MlfModel,
    pub last: MlfModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Mean forecast MSE over `indices`, batch-size weighted, in eval mode.
pub fn forecast_loss(model: &MlfModel, data: &SeriesDataset, indices: &[WindowIndex], batch_size: usize) -> Result<f64> {
    let cfg = &model.config;
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let b = gather_batch(data, chunk, &cfg.period_lengths, cfg.horizon)?;
        total += model.eval_loss(&b)?.forecast * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Trains `model` in place for `cfg.model.epochs` epochs; `on_epoch` sees
/// every record as soon as it is produced.
pub fn train(
    mut model: MlfModel,
    prep: &Prepared,
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let mc = cfg.model.clone();
    let train_idx = prep.windows(Split::Train, &mc);
    if train_idx.is_empty() {
        return Err(mlf_core::MlfError::Data("no training windows".into()).into());
    }
    let val_idx = prep.eval_windows(Split::Val, &mc, &cfg.train);
    let mut opt = Adam::for_params(mc.learning_rate, &model.params);
    let mut rng = param_rng(cfg.seed, "shuffle");
    let mut log = Vec::with_capacity(mc.epochs);
    let mut best: Option<(f64, MlfModel, usize)> = None;
    let mut step = 0usize;
    let started = Instant::now();
    let mut stale = 0usize;
    for epoch in 0..mc.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        if let Some(cap) = cfg.train.max_train_windows {
            order.truncate(cap.max(1));
        }
        let (mut loss_sum, mut f_sum, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(mc.batch_size) {
            let b = gather_batch(&prep.data, chunk, &mc.period_lengths, mc.horizon)?;
            let s = model.train_step(&mut opt, &b, step)?;
            step += 1;
            loss_sum += s.loss * chunk.len() as f64;
            f_sum += s.forecast_loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            Some(forecast_loss(&model, &prep.data, &val_idx, cfg.train.eval_batch_size)?)
        };
        let improved = match (val_loss, &best) {
            (Some(v), Some((b, _, _))) => v < *b,
            _ => true,
        };
        if improved {
            best = Some((val_loss.unwrap_or(0.0), model.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
        }
        let rec = EpochRecord {
            epoch,
            steps: step,
            train_loss: loss_sum / seen as f64,
            train_forecast_loss: f_sum / seen as f64,
            val_loss,
            wall_time_s: started.elapsed().as_secs_f64(),
            best: improved,
        };
        on_epoch(&rec)?;
        log.push(rec);
        if cfg.train.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    let (_, best_model, best_epoch) = match best {
        Some(b) => b,
        None => (0.0, model.clone(), 0),
    };
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        log,
        best_epoch,
    })
}
