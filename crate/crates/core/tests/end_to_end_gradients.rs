use mlf_core::gradcheck::{grad_check, GradCheckConfig};
use mlf_core::model::mlf_loss;
use mlf_core::nn::{param_rng, Ctx, Init, Mode};
use mlf_core::{Batch, MlfConfig, MlfModel, Tensor};

fn toy_config() -> MlfConfig {
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

fn batch(cfg: &MlfConfig, size: usize, seed: u64) -> Batch {
    let mut rng = param_rng(seed, "series");
    let mut windows = vec![Vec::new(); cfg.num_periods()];
    let mut target = Vec::new();
    let end = cfg.longest();
    for _ in 0..size {
        let s = Init::Normal(1.0).sample(&[end + cfg.horizon], &mut rng);
        let s = s.data();
        for (w, &n) in windows.iter_mut().zip(&cfg.period_lengths) {
            w.extend_from_slice(&s[end - n..end]);
        }
        target.extend_from_slice(&s[end..]);
    }
    Batch { size, windows, target }
}

fn check(cfg: MlfConfig) {
    let model = MlfModel::new(cfg.clone(), 21).unwrap();
    let b = batch(&cfg, 3, 5);
    let point: Vec<Tensor> = model.params.iter().map(|e| e.value.clone()).collect();
    let report = grad_check(
        |tape, vars| {
            let mut ctx = Ctx {
                tape,
                params: vars,
                buffers: &model.buffers,
                mode: Mode::Train,
                bn_updates: Vec::new(),
            };
            let bundle = model.forward(&mut ctx, &b)?;
            let target = tape.constant(Tensor::new(&[b.size, cfg.horizon], b.target.clone())?);
            Ok(mlf_loss(tape, &bundle, target, cfg.ablation.reconstruction_loss)?.total)
        },
        &point,
        &GradCheckConfig::default(),
    )
    .unwrap();
    let worst = report.worst.map(|(i, _)| model.params.iter().nth(i).unwrap().name.clone());
    assert!(report.passed, "{report:?} worst parameter {worst:?}");
    assert_eq!(report.checked, model.params.num_scalars());
}

#[test]
fn full_loss_matches_finite_differences() {
    check(toy_config());
}

#[test]
fn ablated_losses_match_finite_differences() {
    for flag in ["irf", "lwi", "map", "ma", "reconstruction_loss"] {
        let mut cfg = toy_config();
        cfg.ablation.disable(flag).unwrap();
        check(cfg);
    }
}

#[test]
fn linear_decoder_loss_matches_finite_differences() {
    let mut cfg = toy_config();
    cfg.decoder = mlf_core::nn::DecoderKind::Linear;
    check(cfg);
}
