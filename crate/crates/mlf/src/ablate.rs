//! Base-versus-ablated comparisons over several seeds.

use mlf_core::data::Split;
use mlf_core::{Ablation, MlfModel};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::train::{train, Prepared, TrainOutcome};

/// Splits comma lists, trims, drops duplicates (first occurrence wins) and
/// rejects unknown names.
pub fn normalize_flags<S: AsRef<str>>(raw: &[S]) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for item in raw {
        for f in item.as_ref().split(',').map(str::trim).filter(|f| !f.is_empty()) {
            Ablation::default()
                .disable(f)
                .map_err(|_| AppError::Usage(format!("unknown ablation flag '{f}', expected one of {:?}", Ablation::FLAGS)))?;
            if !out.iter().any(|o| o == f) {
                out.push(f.to_string());
            }
        }
    }
    Ok(out)
}

/// Trains from `cfg.seed` and scores the best-validation model on the test
/// split.
pub fn train_and_test(cfg: &RunConfig, prep: &Prepared) -> Result<(TrainOutcome, EvalReport)> {
    let model = MlfModel::new(cfg.model.clone(), cfg.seed)?;
    let outcome = train(model, prep, cfg, |_| Ok(()))?;
    let (report, _) = evaluate(&outcome.best, prep, Split::Test, &cfg.train)?;
    Ok((outcome, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    /// Flag turned off, `None` for the base model.
    pub flag: Option<String>,
    pub seeds: Vec<u64>,
    pub mse: Vec<f64>,
    pub mae: Vec<f64>,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<VariantResult>,
}

/// Sample mean and standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn variant_name(flag: Option<&str>) -> String {
    match flag {
        None => "base".into(),
        Some("ma") => "w/o MA".into(),
        Some("reconstruction_loss") => "w/o recon".into(),
        Some(f) => format!("w/o {}", f.to_uppercase()),
    }
}

/// Runs the base config and one variant per flag for every seed.
pub fn ablate(
    cfg: &RunConfig,
    prep: &Prepared,
    flags: &[String],
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &EvalReport),
) -> Result<AblationReport> {
    let flags = normalize_flags(flags)?;
    if seeds.is_empty() {
        return Err(AppError::Usage("at least one seed is required".into()));
    }
    let variants: Vec<Option<&str>> = std::iter::once(None).chain(flags.iter().map(|f| Some(f.as_str()))).collect();
    let mut rows = Vec::with_capacity(variants.len());
    for flag in variants {
        let name = variant_name(flag);
        let (mut mse, mut mae) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let mut run = cfg.clone();
            run.seed = seed;
            if let Some(f) = flag {
                run.model.ablation.disable(f)?;
            }
            let (_, report) = train_and_test(&run, prep)?;
            progress(&name, seed, &report);
            mse.push(report.normalized.mse);
            mae.push(report.normalized.mae);
        }
        let (mse_mean, mse_std) = mean_std(&mse);
        let (mae_mean, mae_std) = mean_std(&mae);
        rows.push(VariantResult {
            name,
            flag: flag.map(str::to_string),
            seeds: seeds.to_vec(),
            mse,
            mae,
            mse_mean,
            mse_std,
            mae_mean,
            mae_std,
        });
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    format!("{:.4} ± {:.4}", r.mse_mean, r.mse_std),
                    format!("{:.4} ± {:.4}", r.mae_mean, r.mae_std),
                ]
            })
            .collect();
        let header = ["variant".to_string(), "mse".to_string(), "mae".to_string()];
        let width = |i: usize| {
            cells
                .iter()
                .map(|c| c[i].chars().count())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        };
        let w = [width(0), width(1), width(2)];
        let line = |c: &[String; 3]| format!("{:<a$}  {:>b$}  {:>c$}\n", c[0], c[1], c[2], a = w[0], b = w[1], c = w[2]);
        let mut out = line(&header);
        for c in &cells {
            out.push_str(&line(c));
        }
        out
    }
}
