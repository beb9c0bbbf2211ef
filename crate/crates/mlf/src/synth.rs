//! Synthetic series so every command can run without downloads.

use std::f64::consts::TAU;

use mlf_core::data::SeriesDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Linear ramp plus noise.
    Trend,
    /// Slow sinusoid plus a fast oscillation whose amplitude and period
    /// switch at random regime boundaries.
    RegimeSwitch,
}

fn d_channels() -> usize {
    1
}
fn d_noise() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub length: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_noise")]
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, length: usize, seed: u64) -> Self {
        SynthSpec {
            kind,
            length,
            channels: 1,
            seed,
            noise: d_noise(),
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SeriesDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let cols: Vec<Vec<f64>> = (0..spec.channels)
        .map(|_| match spec.kind {
            SynthKind::Trend => trend(spec.length, &mut rng),
            SynthKind::RegimeSwitch => regime_switch(spec.length, &mut rng),
        })
        .collect();
    let mut values = Vec::with_capacity(spec.length * spec.channels);
    for t in 0..spec.length {
        for c in &cols {
            values.push(c[t] + noise.sample(&mut rng));
        }
    }
    let names = (0..spec.channels).map(|c| format!("x{c}")).collect();
    Ok(SeriesDataset::new(names, values)?)
}

fn trend(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let slope = rng.random_range(0.5..1.5) / n.max(1) as f64 * 10.0;
    let offset = rng.random_range(-1.0..1.0);
    (0..n).map(|t| offset + slope * t as f64).collect()
}

fn regime_switch(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const FAST_PERIODS: [f64; 4] = [5.0, 7.0, 9.0, 12.0];
    let slow_period = rng.random_range(180.0..260.0);
    let slow_phase = rng.random_range(0.0..TAU);
    let mut out = Vec::with_capacity(n);
    let mut left = 0usize;
    let (mut amp, mut period, mut phase) = (0.0, 1.0, 0.0);
    for t in 0..n {
        if left == 0 {
            left = rng.random_range(20..90);
            amp = rng.random_range(0.2..1.2);
            period = FAST_PERIODS[rng.random_range(0..FAST_PERIODS.len())];
            phase = rng.random_range(0.0..TAU);
        }
        left -= 1;
        let slow = 2.0 * (TAU * t as f64 / slow_period + slow_phase).sin();
        let fast = amp * (TAU * t as f64 / period + phase).sin();
        out.push(slow + fast);
    }
    out
}
