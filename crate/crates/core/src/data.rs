//! In-memory series, split ranges, standardisation and multi-period windows.
//!
//! Channels are treated independently: every `(anchor, channel)` pair is one
//! univariate sample.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{MlfError, Result};
use crate::math;

/// A `T x c` matrix of observations, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesDataset {
    pub channels: Vec<String>,
    pub timestamps: Option<Vec<String>>,
    values: Vec<f64>,
    len: usize,
}

impl SeriesDataset {
    pub fn new(channels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let c = channels.len();
        if c == 0 {
            return Err(MlfError::Data("dataset has no channels".into()));
        }
        if !values.len().is_multiple_of(c) {
            return Err(MlfError::Data(alloc::format!(
                "{} values do not fill rows of {c} channels",
                values.len()
            )));
        }
        let len = values.len() / c;
        if len < 2 {
            return Err(MlfError::Data(alloc::format!("need at least 2 rows, found {len}")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MlfError::Data(alloc::format!(
                "non-finite value at row {}, column {}",
                i / c,
                i % c
            )));
        }
        Ok(SeriesDataset {
            channels,
            timestamps: None,
            values,
            len,
        })
    }

    pub fn with_timestamps(mut self, timestamps: Vec<String>) -> Result<Self> {
        if timestamps.len() != self.len {
            return Err(MlfError::mismatch("timestamps", &[self.len], &[timestamps.len()]));
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, channel: usize) -> f64 {
        self.values[t * self.channels.len() + channel]
    }

    /// Copies `channel` over the time range `range`.
    pub fn column(&self, channel: usize, range: Range<usize>) -> Vec<f64> {
        range.map(|t| self.get(t, channel)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitScheme {
    /// Fractions of the series; the validation share takes the remainder.
    Ratio { train: f64, test: f64 },
    /// 12 / 4 / 4 months of 30 days.
    EttMonths { steps_per_day: usize },
}

impl Default for SplitScheme {
    fn default() -> Self {
        SplitScheme::Ratio { train: 0.7, test: 0.2 }
    }
}

/// Anchors live in `start..end`; history may reach back to `history_start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRange {
    pub start: usize,
    pub end: usize,
    pub history_start: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: SplitRange,
    pub val: SplitRange,
    pub test: SplitRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn get(&self, split: Split) -> &SplitRange {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Contiguous train/val/test ranges; val and test history extends back by
/// the longest period.
pub fn split_dataset(len: usize, scheme: SplitScheme, longest: usize, horizon: usize) -> Result<Splits> {
    if len < longest + horizon {
        return Err(MlfError::Data(alloc::format!(
            "series of length {len} is shorter than longest period {longest} plus horizon {horizon}"
        )));
    }
    let (train_end, val_end, test_end) = match scheme {
        SplitScheme::Ratio { train, test } => {
            if !(train > 0.0 && test > 0.0 && train + test < 1.0) {
                return Err(MlfError::config("split", "ratios must be positive and sum below 1"));
            }
            let n_train = (len as f64 * train) as usize;
            let n_test = (len as f64 * test) as usize;
            (n_train, len - n_test, len)
        }
        SplitScheme::EttMonths { steps_per_day } => {
            let month = 30 * steps_per_day;
            let (a, b, c) = (12 * month, 16 * month, 20 * month);
            if len < c {
                return Err(MlfError::Data(alloc::format!(
                    "month-based split needs {c} rows, found {len}"
                )));
            }
            (a, b, c)
        }
    };
    let range = |start: usize, end: usize| SplitRange {
        start,
        end,
        history_start: start.saturating_sub(longest),
    };
    Ok(Splits {
        train: SplitRange {
            start: 0,
            end: train_end,
            history_start: 0,
        },
        val: range(train_end, val_end),
        test: range(val_end, test_end),
    })
}

/// Per-channel statistics of the training range (population std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &SeriesDataset, train: Range<usize>) -> Result<Self> {
        if train.is_empty() || train.end > ds.len() {
            return Err(MlfError::Data(alloc::format!("invalid train range {train:?}")));
        }
        let n = train.len() as f64;
        let mut mean = Vec::with_capacity(ds.num_channels());
        let mut std = Vec::with_capacity(ds.num_channels());
        for c in 0..ds.num_channels() {
            let m = train.clone().map(|t| ds.get(t, c)).sum::<f64>() / n;
            let v = train.clone().map(|t| (ds.get(t, c) - m) * (ds.get(t, c) - m)).sum::<f64>() / n;
            let s = math::sqrt(v);
            if s.is_nan() || s <= 0.0 {
                return Err(MlfError::Data(alloc::format!(
                    "channel '{}' is constant on the training range",
                    ds.channels[c]
                )));
            }
            mean.push(m);
            std.push(s);
        }
        Ok(Standardizer { mean, std })
    }

    pub fn transform(&self, ds: &SeriesDataset) -> Result<SeriesDataset> {
        let c = self.check(ds)?;
        let values = ds
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect();
        Ok(SeriesDataset {
            values,
            ..ds.clone()
        })
    }

    pub fn inverse(&self, ds: &SeriesDataset) -> Result<SeriesDataset> {
        let c = self.check(ds)?;
        let values = ds
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % c] + self.mean[i % c])
            .collect();
        Ok(SeriesDataset {
            values,
            ..ds.clone()
        })
    }

    pub fn normalize(&self, value: f64, channel: usize) -> Result<f64> {
        self.channel(channel)?;
        Ok((value - self.mean[channel]) / self.std[channel])
    }

    /// `pred * std + mean` for one channel.
    pub fn denormalize(&self, pred: f64, channel: usize) -> Result<f64> {
        self.channel(channel)?;
        Ok(pred * self.std[channel] + self.mean[channel])
    }

    fn channel(&self, channel: usize) -> Result<()> {
        if channel >= self.mean.len() {
            return Err(MlfError::Data(alloc::format!(
                "unknown channel {channel}, dataset has {}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    fn check(&self, ds: &SeriesDataset) -> Result<usize> {
        let c = ds.num_channels();
        if c != self.mean.len() {
            return Err(MlfError::mismatch("standardize", &[c], &[self.mean.len()]));
        }
        Ok(c)
    }
}

/// One sample: the series ends at `anchor` (exclusive) for `channel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowIndex {
    pub anchor: usize,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiPeriodWindow {
    /// Shortest period first; window `s` covers `[anchor - n_s, anchor)`.
    pub windows: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub index: WindowIndex,
}

/// All `(anchor, channel)` pairs with a full history and target inside the
/// split: `anchor >= n_S`, `anchor >= split.start`, `anchor + m <= split.end`.
/// Anchor-major order.
pub fn sample_windows(ds: &SeriesDataset, split: &SplitRange, periods: &[usize], horizon: usize) -> Vec<WindowIndex> {
    let longest = periods.iter().copied().max().unwrap_or(0);
    let first = split.start.max(longest);
    let end = split.end.min(ds.len());
    if end < horizon || first + horizon > end {
        return Vec::new();
    }
    (first..=end - horizon)
        .flat_map(|anchor| (0..ds.num_channels()).map(move |channel| WindowIndex { anchor, channel }))
        .collect()
}

pub fn check_periods(periods: &[usize]) -> Result<()> {
    if periods.is_empty() {
        return Err(MlfError::config("period_lengths", "must list at least one period"));
    }
    if periods[0] == 0 || periods.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MlfError::config("period_lengths", "must be positive and strictly increasing"));
    }
    Ok(())
}

pub fn window(ds: &SeriesDataset, idx: WindowIndex, periods: &[usize], horizon: usize) -> Result<MultiPeriodWindow> {
    let longest = *periods.last().ok_or_else(|| MlfError::config("period_lengths", "empty"))?;
    if idx.anchor < longest || idx.anchor + horizon > ds.len() || idx.channel >= ds.num_channels() {
        return Err(MlfError::Data(alloc::format!("window {idx:?} out of range")));
    }
    Ok(MultiPeriodWindow {
        windows: periods
            .iter()
            .map(|&n| ds.column(idx.channel, idx.anchor - n..idx.anchor))
            .collect(),
        target: ds.column(idx.channel, idx.anchor..idx.anchor + horizon),
        index: idx,
    })
}

/// A mini-batch in model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// `windows[s]` holds `size * n_s` values, sample-major.
    pub windows: Vec<Vec<f64>>,
    /// `size * m` values, or empty when forecasting without targets.
    pub target: Vec<f64>,
}

impl Batch {
    pub fn from_windows(samples: &[MultiPeriodWindow]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(MlfError::DegenerateInput("empty batch".into()));
        };
        let mut windows: Vec<Vec<f64>> = first.windows.iter().map(|w| Vec::with_capacity(w.len() * samples.len())).collect();
        let mut target = Vec::with_capacity(first.target.len() * samples.len());
        for s in samples {
            if s.windows.len() != windows.len() {
                return Err(MlfError::mismatch("batch", &[windows.len()], &[s.windows.len()]));
            }
            for (dst, w) in windows.iter_mut().zip(&s.windows) {
                dst.extend_from_slice(w);
            }
            target.extend_from_slice(&s.target);
        }
        Ok(Batch {
            size: samples.len(),
            windows,
            target,
        })
    }
}

pub fn gather_batch(ds: &SeriesDataset, indices: &[WindowIndex], periods: &[usize], horizon: usize) -> Result<Batch> {
    let samples: Vec<MultiPeriodWindow> = indices
        .iter()
        .map(|&i| window(ds, i, periods, horizon))
        .collect::<Result<_>>()?;
    Batch::from_windows(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn ds(t: usize, c: usize) -> SeriesDataset {
        let names = (0..c).map(|i| alloc::format!("c{i}")).collect();
        let values = (0..t * c).map(|i| (i / c) as f64 * 10.0 + (i % c) as f64 + 1.0).collect();
        SeriesDataset::new(names, values).unwrap()
    }

    #[test]
    fn construction_preserves_order() {
        let d = SeriesDataset::new(vec!["a".to_string(), "b".to_string()], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.get(2, 0), 5.0);
        assert_eq!(d.column(1, 0..3), vec![2., 4., 6.]);
        assert!(SeriesDataset::new(vec!["a".to_string()], vec![1.0]).is_err());
        assert!(SeriesDataset::new(vec!["a".to_string()], vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn ratio_split() {
        let s = split_dataset(100, SplitScheme::default(), 4, 1).unwrap();
        assert_eq!((s.train.start, s.train.end), (0, 70));
        assert_eq!((s.val.start, s.val.end), (70, 80));
        assert_eq!((s.test.start, s.test.end), (80, 100));
        assert_eq!(s.val.history_start, 66);
        assert_eq!(s.test.history_start, 76);
        assert!(split_dataset(10, SplitScheme::default(), 10, 1).is_err());
    }

    #[test]
    fn month_split() {
        let s = split_dataset(17420, SplitScheme::EttMonths { steps_per_day: 24 }, 512, 96).unwrap();
        assert_eq!(s.train.end, 8640);
        assert_eq!(s.val.end, 8640 + 2880);
        assert_eq!(s.test.end, 14400);
        assert!(split_dataset(1000, SplitScheme::EttMonths { steps_per_day: 24 }, 10, 1).is_err());
    }

    #[test]
    fn standardize_round_trip() {
        let d = ds(20, 2);
        let st = Standardizer::fit(&d, 0..14).unwrap();
        let n = st.transform(&d).unwrap();
        for c in 0..2 {
            let m: f64 = n.column(c, 0..14).iter().sum::<f64>() / 14.0;
            assert!(m.abs() < 1e-10);
        }
        let back = st.inverse(&n).unwrap();
        for (a, b) in back.values().iter().zip(d.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let st = Standardizer {
            mean: vec![3.0],
            std: vec![2.0],
        };
        assert_eq!(st.denormalize(1.0, 0).unwrap(), 5.0);
        assert_eq!(st.denormalize(0.0, 0).unwrap(), 3.0);
        assert!(st.denormalize(0.0, 1).is_err());
        assert_eq!(st.normalize(5.0, 0).unwrap(), 1.0);
    }

    #[test]
    fn statistics_ignore_later_values() {
        let mut d = ds(20, 1);
        let a = Standardizer::fit(&d, 0..14).unwrap();
        d.values[19] = 1e6;
        let b = Standardizer::fit(&d, 0..14).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_channel_rejected() {
        let d = SeriesDataset::new(vec!["a".to_string()], vec![2.0; 10]).unwrap();
        assert!(Standardizer::fit(&d, 0..7).is_err());
    }

    #[test]
    fn window_counts_and_suffix() {
        let d = ds(10, 2);
        let all = SplitRange {
            start: 0,
            end: 10,
            history_start: 0,
        };
        let idx = sample_windows(&d, &all, &[2, 4], 1);
        assert_eq!(idx.len(), 12);
        assert_eq!(idx[0].anchor, 4);
        assert_eq!(idx.last().unwrap().anchor, 9);
        for &i in &idx {
            let w = window(&d, i, &[2, 4], 1).unwrap();
            assert_eq!(w.windows[0][..], w.windows[1][2..]);
            assert_eq!(w.target[0], d.get(i.anchor, i.channel));
            assert_eq!(*w.windows[1].last().unwrap(), d.get(i.anchor - 1, i.channel));
        }
        let big = ds(400, 1);
        let idx = sample_windows(&big, &all_of(&big), &[5, 10, 30, 60, 120, 150], 5);
        assert_eq!(idx[0].anchor, 150);
    }

    fn all_of(d: &SeriesDataset) -> SplitRange {
        SplitRange {
            start: 0,
            end: d.len(),
            history_start: 0,
        }
    }

    #[test]
    fn windows_stay_inside_split() {
        let d = ds(100, 1);
        let s = split_dataset(100, SplitScheme::default(), 8, 3).unwrap();
        for split in [&s.train, &s.val, &s.test] {
            let idx = sample_windows(&d, split, &[4, 8], 3);
            assert!(!idx.is_empty());
            assert!(idx.iter().all(|i| i.anchor + 3 <= split.end && i.anchor >= split.start));
            assert!(idx.iter().all(|i| i.anchor - 8 >= split.history_start));
        }
        let short = SplitRange {
            start: 0,
            end: 5,
            history_start: 0,
        };
        assert!(sample_windows(&d, &short, &[4, 8], 3).is_empty());
    }

    #[test]
    fn batch_layout() {
        let d = ds(10, 1);
        let b = gather_batch(
            &d,
            &[WindowIndex { anchor: 4, channel: 0 }, WindowIndex { anchor: 6, channel: 0 }],
            &[2, 4],
            2,
        )
        .unwrap();
        assert_eq!(b.size, 2);
        assert_eq!(b.windows[0], vec![21., 31., 41., 51.]);
        assert_eq!(b.windows[1].len(), 8);
        assert_eq!(b.target, vec![41., 51., 61., 71.]);
    }

    #[test]
    fn period_validation() {
        assert!(check_periods(&[2, 4]).is_ok());
        assert!(check_periods(&[]).is_err());
        assert!(check_periods(&[4, 4]).is_err());
        assert!(check_periods(&[0, 4]).is_err());
    }
}
