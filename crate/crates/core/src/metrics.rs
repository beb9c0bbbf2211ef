//! Point-forecast error metrics and the history/forecast consistency statistic.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{MlfError, Result};

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(MlfError::mismatch("metrics", &[y.len()], &[y_hat.len()]));
    }
    if y.is_empty() {
        return Err(MlfError::UndefinedMetric("no samples".into()));
    }
    Ok(())
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// `100 * sum|y - y_hat| / sum|y|`, in percent.
pub fn wmape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let denom: f64 = y.iter().map(|v| v.abs()).sum();
    if denom == 0.0 {
        return Err(MlfError::UndefinedMetric("WMAPE with all-zero targets".into()));
    }
    let num: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum();
    Ok(100.0 * num / denom)
}

/// WMAPE computed separately for each group label and summed; used for
/// multi-variable data where the figure of merit is the per-variable sum.
pub fn wmape_sum_by_group(y: &[f64], y_hat: &[f64], groups: &[usize]) -> Result<f64> {
    check_pair(y, y_hat)?;
    if groups.len() != y.len() {
        return Err(MlfError::mismatch("wmape_sum_by_group", &[y.len()], &[groups.len()]));
    }
    let n = groups.iter().max().map_or(0, |g| g + 1);
    let mut num = alloc::vec![0.0; n];
    let mut den = alloc::vec![0.0; n];
    for ((&a, &b), &g) in y.iter().zip(y_hat).zip(groups) {
        num[g] += (a - b).abs();
        den[g] += a.abs();
    }
    let mut total = 0.0;
    for (g, (&nm, &d)) in num.iter().zip(&den).enumerate() {
        if !groups.contains(&g) {
            continue;
        }
        if d == 0.0 {
            return Err(MlfError::UndefinedMetric(alloc::format!("WMAPE of group {g} has all-zero targets")));
        }
        total += 100.0 * nm / d;
    }
    Ok(total)
}

/// Mean squared gap between a 30-step history and a single forecast value.
pub fn kappa(history: &[f64; 30], forecast: f64) -> f64 {
    history.iter().map(|h| (h - forecast) * (h - forecast)).sum::<f64>() / 30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub mse: f64,
    pub mae: f64,
}

/// Samples whose lowest error came from one particular period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaPartition {
    pub period_index: usize,
    pub count: usize,
    /// `None` for an empty partition.
    pub mean_kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    /// Percent; `None` when every target is zero.
    pub wmape: Option<f64>,
    pub per_horizon: Vec<HorizonMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kappa_partitions: Vec<KappaPartition>,
}

impl MetricsReport {
    /// `y` and `y_hat` hold `samples * horizon` values, sample-major.
    pub fn compute(y: &[f64], y_hat: &[f64], horizon: usize) -> Result<Self> {
        check_pair(y, y_hat)?;
        if horizon == 0 || !y.len().is_multiple_of(horizon) {
            return Err(MlfError::mismatch("metrics", &[y.len()], &[horizon]));
        }
        let samples = y.len() / horizon;
        let per_horizon = (0..horizon)
            .map(|h| {
                let (mut se, mut ae) = (0.0, 0.0);
                for s in 0..samples {
                    let d = y[s * horizon + h] - y_hat[s * horizon + h];
                    se += d * d;
                    ae += d.abs();
                }
                HorizonMetrics {
                    mse: se / samples as f64,
                    mae: ae / samples as f64,
                }
            })
            .collect();
        let wmape = match wmape(y, y_hat) {
            Ok(v) => Some(v),
            Err(MlfError::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            mse: mse(y, y_hat)?,
            mae: mae(y, y_hat)?,
            wmape,
            per_horizon,
            kappa_partitions: Vec::new(),
        })
    }
}

/// Index of the smallest error per sample; `errors[p][i]` is period `p`'s
/// error on sample `i`. Ties go to the earlier period.
pub fn best_period(errors: &[Vec<f64>]) -> Result<Vec<usize>> {
    let Some(first) = errors.first() else {
        return Err(MlfError::DegenerateInput("no periods".into()));
    };
    let n = first.len();
    if let Some(bad) = errors.iter().find(|e| e.len() != n) {
        return Err(MlfError::mismatch("best_period", &[n], &[bad.len()]));
    }
    Ok((0..n)
        .map(|i| {
            let mut best = 0;
            for p in 1..errors.len() {
                if errors[p][i] < errors[best][i] {
                    best = p;
                }
            }
            best
        })
        .collect())
}

/// Mean kappa of the samples assigned to each period.
pub fn kappa_partitions(kappas: &[f64], assignment: &[usize], periods: usize) -> Result<Vec<KappaPartition>> {
    if kappas.len() != assignment.len() {
        return Err(MlfError::mismatch("kappa_partitions", &[kappas.len()], &[assignment.len()]));
    }
    let mut sums = alloc::vec![0.0; periods];
    let mut counts = alloc::vec![0usize; periods];
    for (&k, &p) in kappas.iter().zip(assignment) {
        if p >= periods {
            return Err(MlfError::Data(alloc::format!("period index {p} out of range {periods}")));
        }
        sums[p] += k;
        counts[p] += 1;
    }
    Ok((0..periods)
        .map(|p| KappaPartition {
            period_index: p,
            count: counts[p],
            mean_kappa: (counts[p] > 0).then(|| sums[p] / counts[p] as f64),
        })
        .collect())
}
