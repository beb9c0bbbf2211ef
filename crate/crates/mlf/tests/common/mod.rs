#![allow(dead_code)]

use mlf_core::data::{gather_batch, sample_windows, SplitRange, Standardizer};
use mlf_core::optim::Adam;
use mlf_core::{MlfConfig, MlfModel};
use mlf::synth::{generate, SynthKind, SynthSpec};

/// S=2, periods (4, 8), N=4, r=2, D=4, H=2, E=2, m=2.
pub fn toy_config() -> MlfConfig {
    MlfConfig {
        num_patches: 4,
        squeeze_factor: 2,
        d_model: 4,
        n_heads: 2,
        n_blocks: 2,
        lwi_filters: 2,
        ..MlfConfig::new(vec![4, 8], 2)
    }
}

/// Full-batch Adam on 64 windows of a noiseless standardised trend.
/// Returns the loss after every step.
pub fn overfit_losses(cfg: &MlfConfig, lr: f64, steps: usize, seed: u64) -> Vec<f64> {
    let samples = 64;
    let len = cfg.longest() + cfg.horizon + samples - 1;
    let spec = SynthSpec {
        noise: 0.0,
        ..SynthSpec::new(SynthKind::Trend, len, seed)
    };
    let raw = generate(&spec).unwrap();
    let data = Standardizer::fit(&raw, 0..len).unwrap().transform(&raw).unwrap();
    let split = SplitRange {
        start: 0,
        end: len,
        history_start: 0,
    };
    let idx = sample_windows(&data, &split, &cfg.period_lengths, cfg.horizon);
    assert_eq!(idx.len(), samples);
    let batch = gather_batch(&data, &idx, &cfg.period_lengths, cfg.horizon).unwrap();
    let mut model = MlfModel::new(cfg.clone(), seed).unwrap();
    let mut opt = Adam::for_params(lr, &model.params);
    (0..steps).map(|s| model.train_step(&mut opt, &batch, s).unwrap().loss).collect()
}

use mlf::config::{DataSource, RunConfig, TrainOptions};
use mlf_core::data::SplitScheme;

/// Regime-switch benchmark shared by the multi-period and ablation checks.
pub fn regime_config(periods: Vec<usize>, seed: u64) -> RunConfig {
    RunConfig {
        data: DataSource::Synth(SynthSpec {
            channels: 1,
            ..SynthSpec::new(SynthKind::RegimeSwitch, 4000, 11)
        }),
        split: SplitScheme::default(),
        model: MlfConfig {
            num_patches: 16,
            squeeze_factor: 2,
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            lwi_filters: 4,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 10,
            ..MlfConfig::new(periods, 8)
        },
        seed,
        output_dir: std::env::temp_dir().join("mlf-regime"),
        train: TrainOptions {
            max_train_windows: Some(1024),
            max_eval_windows: None,
            ..TrainOptions::default()
        },
    }
}
