//! Split evaluation, the repeat-last baseline and diagnostic exports.

use std::path::Path;

use mlf_core::data::{gather_batch, Split, WindowIndex};
use mlf_core::metrics::{best_period, kappa, kappa_partitions, wmape_sum_by_group, KappaPartition, MetricsReport};
use mlf_core::{MlfModel, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainOptions;
use crate::csvio::write_csv;
use crate::error::{AppError, Result};
use crate::train::Prepared;

/// Model and baseline forecasts for every evaluated window, normalised
/// units, sample-major `[windows, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPredictions {
    pub indices: Vec<WindowIndex>,
    pub horizon: usize,
    pub periods: usize,
    pub pred: Vec<f64>,
    pub target: Vec<f64>,
    /// Last observed value repeated over the horizon.
    pub naive: Vec<f64>,
    /// Integration weights `[windows, S, m]`.
    pub att: Option<Vec<f64>>,
    /// Per-block attention `[H, T, T]` of the first window.
    pub first_attention: Vec<Tensor>,
}

pub fn predict_windows(model: &MlfModel, prep: &Prepared, indices: Vec<WindowIndex>, batch_size: usize) -> Result<SplitPredictions> {
    let cfg = &model.config;
    let (m, s) = (cfg.horizon, cfg.num_periods());
    let mut out = SplitPredictions {
        horizon: m,
        periods: s,
        pred: Vec::with_capacity(indices.len() * m),
        target: Vec::with_capacity(indices.len() * m),
        naive: Vec::with_capacity(indices.len() * m),
        att: cfg.ablation.lwi.then(Vec::new),
        first_attention: Vec::new(),
        indices,
    };
    for (i, chunk) in out.indices.chunks(batch_size.max(1)).enumerate() {
        let b = gather_batch(&prep.data, chunk, &cfg.period_lengths, m)?;
        let p = model.predict(&b)?;
        out.pred.extend_from_slice(p.forecast.data());
        out.target.extend_from_slice(&b.target);
        let longest = b.windows.last().expect("at least one period");
        for row in longest.chunks(cfg.longest()) {
            out.naive.extend(std::iter::repeat_n(*row.last().expect("non-empty"), m));
        }
        if let (Some(acc), Some(att)) = (out.att.as_mut(), p.att.as_ref()) {
            acc.extend_from_slice(att.data());
        }
        if i == 0 {
            let h = cfg.n_heads;
            out.first_attention = p
                .attention
                .iter()
                .map(|a| {
                    let per = a.len() / a.shape()[0] * h;
                    let t = a.shape()[1];
                    Tensor::new(&[h, t, t], a.data()[..per].to_vec())
                })
                .collect::<std::result::Result<_, _>>()?;
        }
    }
    Ok(out)
}

pub fn predict_split(model: &MlfModel, prep: &Prepared, split: Split, opts: &TrainOptions) -> Result<SplitPredictions> {
    let idx = prep.eval_windows(split, &model.config, opts);
    if idx.is_empty() {
        return Err(mlf_core::MlfError::Data(format!("no {split:?} windows")).into());
    }
    predict_windows(model, prep, idx, opts.eval_batch_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub windows: usize,
    pub normalized: MetricsReport,
    pub original: MetricsReport,
    pub naive_normalized: MetricsReport,
    pub naive_original: MetricsReport,
    /// Per-channel WMAPE in original units, summed over channels.
    pub wmape_channel_sum: Option<f64>,
}

impl SplitPredictions {
    fn denormalize(&self, prep: &Prepared, values: &[f64]) -> Result<Vec<f64>> {
        let m = self.horizon;
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| Ok(prep.standardizer.denormalize(v, self.indices[i / m].channel)?))
            .collect()
    }

    fn channel_of_each_value(&self) -> Vec<usize> {
        self.indices
            .iter()
            .flat_map(|i| std::iter::repeat_n(i.channel, self.horizon))
            .collect()
    }

    pub fn report(&self, prep: &Prepared, split: Split) -> Result<EvalReport> {
        let m = self.horizon;
        let target = self.denormalize(prep, &self.target)?;
        let pred = self.denormalize(prep, &self.pred)?;
        let naive = self.denormalize(prep, &self.naive)?;
        let wmape_channel_sum = wmape_sum_by_group(&target, &pred, &self.channel_of_each_value()).ok();
        Ok(EvalReport {
            split,
            windows: self.indices.len(),
            normalized: MetricsReport::compute(&self.target, &self.pred, m)?,
            original: MetricsReport::compute(&target, &pred, m)?,
            naive_normalized: MetricsReport::compute(&self.target, &self.naive, m)?,
            naive_original: MetricsReport::compute(&target, &naive, m)?,
            wmape_channel_sum,
        })
    }

    /// Writes `attention_block{e}.csv` (head-averaged `T x T` matrix of the
    /// first window) plus `attention.json` describing the token layout.
    pub fn export_attention(&self, dir: &Path, model: &MlfModel) -> Result<Vec<std::path::PathBuf>> {
        let cfg = &model.config;
        let tokens = cfg.tokens_per_period()?;
        let mut files = Vec::new();
        for (e, a) in self.first_attention.iter().enumerate() {
            let (h, t) = (a.shape()[0], a.shape()[1]);
            let mut mean = vec![0.0; t * t];
            for head in a.data().chunks(t * t) {
                for (m, v) in mean.iter_mut().zip(head) {
                    *m += v / h as f64;
                }
            }
            let header: Vec<String> = (0..t).map(|k| format!("k{k}")).collect();
            let path = dir.join(format!("attention_block{e}.csv"));
            write_csv(&path, &header, mean.chunks(t).map(|r| r.iter().map(f64::to_string).collect()))?;
            files.push(path);
        }
        let first = self.indices.first();
        let meta = serde_json::json!({
            "blocks": self.first_attention.len(),
            "heads_averaged": cfg.n_heads,
            "tokens": tokens * cfg.num_periods(),
            "tokens_per_period": tokens,
            "period_lengths": cfg.period_lengths,
            "anchor": first.map(|i| i.anchor),
            "channel": first.map(|i| i.channel),
        });
        let path = dir.join("attention.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("json")).map_err(|e| AppError::io(&path, e))?;
        files.push(path);
        Ok(files)
    }

    /// Writes `lwi_weights.csv`: one row per period, the integration weight
    /// at each horizon step averaged over the evaluated windows.
    pub fn export_att(&self, dir: &Path, model: &MlfModel) -> Result<Option<std::path::PathBuf>> {
        let Some(att) = &self.att else { return Ok(None) };
        let (s, m) = (self.periods, self.horizon);
        let n = self.indices.len() as f64;
        let mut mean = vec![0.0; s * m];
        for sample in att.chunks(s * m) {
            for (a, v) in mean.iter_mut().zip(sample) {
                *a += v / n;
            }
        }
        let mut header = vec!["period".to_string()];
        header.extend((0..m).map(|h| format!("h{h}")));
        let rows = mean.chunks(m).enumerate().map(|(p, r)| {
            let mut row = vec![model.config.period_lengths[p].to_string()];
            row.extend(r.iter().map(f64::to_string));
            row
        });
        let path = dir.join("lwi_weights.csv");
        write_csv(&path, &header, rows)?;
        Ok(Some(path))
    }
}

pub fn evaluate(model: &MlfModel, prep: &Prepared, split: Split, opts: &TrainOptions) -> Result<(EvalReport, SplitPredictions)> {
    let p = predict_split(model, prep, split, opts)?;
    Ok((p.report(prep, split)?, p))
}

/// Trailing history length used by the consistency statistic.
pub const KAPPA_HISTORY: usize = 30;

/// Scores every single-period model on the same windows, assigns each window
/// to the period with the lowest first-step squared error, and averages
/// kappa (last 30 observed values against the true next value) per period.
/// `models` must be ordered by period and share the horizon.
pub fn kappa_analysis(models: &[MlfModel], prep: &Prepared, split: Split, opts: &TrainOptions) -> Result<Vec<KappaPartition>> {
    let Some(first) = models.first() else {
        return Err(AppError::Usage("kappa analysis needs at least one model".into()));
    };
    let longest = models.iter().map(|m| m.config.longest()).max().unwrap_or(0).max(KAPPA_HISTORY);
    let m = first.config.horizon;
    let mut probe = first.config.clone();
    probe.period_lengths = vec![longest];
    let indices = prep.eval_windows(split, &probe, opts);
    if indices.is_empty() {
        return Err(mlf_core::MlfError::Data(format!("no {split:?} windows")).into());
    }
    let mut errors = Vec::with_capacity(models.len());
    for model in models {
        if model.config.horizon != m {
            return Err(AppError::Usage("kappa analysis models must share the horizon".into()));
        }
        let p = predict_windows(model, prep, indices.clone(), opts.eval_batch_size)?;
        errors.push(
            p.pred
                .chunks(m)
                .zip(p.target.chunks(m))
                .map(|(y_hat, y)| (y_hat[0] - y[0]) * (y_hat[0] - y[0]))
                .collect::<Vec<f64>>(),
        );
    }
    let kappas: Vec<f64> = indices
        .iter()
        .map(|i| {
            let hist = prep.data.column(i.channel, i.anchor - KAPPA_HISTORY..i.anchor);
            let hist: &[f64; KAPPA_HISTORY] = hist.as_slice().try_into().expect("30 values");
            kappa(hist, prep.data.get(i.anchor, i.channel))
        })
        .collect();
    let assignment = best_period(&errors)?;
    Ok(kappa_partitions(&kappas, &assignment, models.len())?)
}
