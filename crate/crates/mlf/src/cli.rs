//! Command implementations behind the `mlf` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mlf_core::data::{Batch, Split};
use mlf_core::MlfModel;
use serde_json::json;

use crate::ablate::{ablate, normalize_flags};
use crate::checkpoint::Checkpoint;
use crate::config::{self, RunConfig};
use crate::csvio::{load_csv, save_dataset, write_csv};
use crate::error::{AppError, Result};
use crate::eval::evaluate;
use crate::synth::{generate, SynthKind, SynthSpec};
use crate::train::{prepare, prepare_dataset, train, Prepared};

#[derive(Debug, Parser)]
#[command(name = "mlf", version, about = "Multi-period forecasting: train, evaluate, forecast, ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config field, e.g. `--set model.d_model=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed; replaces the config value.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = config::load(&self.config, &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, epoch log and config snapshot.
    Train(ConfigArgs),
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        run: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Write head-averaged attention matrices of the first window.
        #[arg(long)]
        export_attention: bool,
        /// Write the mean integration weights per period and horizon step.
        #[arg(long)]
        export_weights: bool,
        /// Also print the repeat-last-value baseline.
        #[arg(long)]
        naive: bool,
    },
    /// Forecast the steps after the end of a CSV file.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Must equal the horizon the model was trained for.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Compare the base model with ablated variants.
    Ablate {
        #[command(flatten)]
        run: ConfigArgs,
        /// Components to switch off: irf, lwi, map, ma, reconstruction_loss.
        #[arg(long, value_delimiter = ',')]
        flags: Vec<String>,
        /// Number of seeds, counted up from the master seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Write a synthetic dataset as CSV.
    SynthData {
        #[arg(long = "synth", value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 2000)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn write_snapshot(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("config.json"), &cfg.to_json())
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args.load()?, out),
        Command::Eval {
            run,
            checkpoint,
            split,
            export_attention,
            export_weights,
            naive,
        } => cmd_eval(&run.load()?, &checkpoint, split.into(), export_attention, export_weights, naive, out),
        Command::Forecast {
            checkpoint,
            csv,
            horizon,
            out: path,
        } => cmd_forecast(&checkpoint, &csv, horizon, &path, out),
        Command::Ablate { run, flags, seeds } => cmd_ablate(&run.load()?, &flags, seeds, out),
        Command::SynthData {
            kind,
            length,
            channels,
            seed,
            noise,
            out: path,
        } => {
            let ds = generate(&SynthSpec {
                kind,
                length,
                channels,
                seed,
                noise,
            })?;
            save_dataset(&path, &ds)?;
            writeln!(out, "wrote {} rows x {} channels to {}", ds.len(), ds.num_channels(), path.display()).ok();
            Ok(())
        }
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    write_snapshot(cfg)?;
    let prep = prepare(cfg)?;
    let model = MlfModel::new(cfg.model.clone(), cfg.seed)?;
    writeln!(out, "{}", model.describe()).ok();
    let log_path = cfg.output_dir.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| AppError::io(&log_path, e))?;
    let outcome = train(model, &prep, cfg, |rec| {
        let line = json!({"event": "epoch", "record": rec});
        writeln!(log, "{line}").map_err(|e| AppError::io(&log_path, e))?;
        writeln!(
            out,
            "epoch {:>3}  train {:.6}  val {}  {:.1}s",
            rec.epoch,
            rec.train_loss,
            rec.val_loss.map_or("-".into(), |v| format!("{v:.6}")),
            rec.wall_time_s
        )
        .ok();
        Ok(())
    })?;
    let ck = Checkpoint::new(&outcome.best, &prep.standardizer, &prep.raw.channels);
    let ck_path = cfg.output_dir.join("checkpoint.json");
    ck.save(&ck_path)?;
    // score exactly what was written, so a later `eval` reproduces it
    let model = Checkpoint::load(&ck_path)?.model()?;
    let (report, _) = evaluate(&model, &prep, Split::Test, &cfg.train)?;
    let line = json!({"event": "test", "best_epoch": outcome.best_epoch, "report": report});
    writeln!(log, "{line}").map_err(|e| AppError::io(&log_path, e))?;
    writeln!(
        out,
        "test mse {:.6}  mae {:.6}  (naive mse {:.6})  checkpoint {}",
        report.normalized.mse,
        report.normalized.mae,
        report.naive_normalized.mse,
        ck_path.display()
    )
    .ok();
    Ok(())
}

fn prepare_for_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Prepared> {
    let raw = crate::train::load_source(&cfg.data)?;
    if raw.num_channels() != ck.channels.len() {
        return Err(mlf_core::MlfError::ShapeMismatch { op: "eval channels", left: vec![raw.num_channels()], right: vec![ck.channels.len()] }.into());
    }
    let mut run = cfg.clone();
    run.model = ck.config.clone();
    let mut prep = prepare_dataset(raw, &run)?;
    prep.standardizer = ck.standardizer.clone();
    prep.data = prep.standardizer.transform(&prep.raw)?;
    Ok(prep)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    export_attention: bool,
    export_weights: bool,
    naive: bool,
    out: &mut impl Write,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let prep = prepare_for_checkpoint(cfg, &ck)?;
    let (report, preds) = evaluate(&model, &prep, split, &cfg.train)?;
    create_dir(&cfg.output_dir)?;
    let mut body = serde_json::to_value(&report).expect("report serialises");
    if !naive {
        let obj = body.as_object_mut().expect("object");
        obj.remove("naive_normalized");
        obj.remove("naive_original");
    }
    let text = serde_json::to_string_pretty(&body).expect("json");
    write_file(&cfg.output_dir.join(format!("eval_{}.json", split_name(split))), &text)?;
    writeln!(out, "{text}").ok();
    if export_attention {
        for p in preds.export_attention(&cfg.output_dir, &model)? {
            writeln!(out, "wrote {}", p.display()).ok();
        }
    }
    if export_weights {
        match preds.export_att(&cfg.output_dir, &model)? {
            Some(p) => writeln!(out, "wrote {}", p.display()).ok(),
            None => writeln!(out, "integration weights disabled for this model").ok(),
        };
    }
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// One row per horizon step, one column per channel, original units.
pub fn forecast_rows(ck: &Checkpoint, csv: &Path, horizon: Option<usize>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let model = ck.model()?;
    let cfg = &model.config;
    if let Some(h) = horizon {
        if h != cfg.horizon {
            return Err(AppError::Usage(format!("model forecasts {} steps, {h} requested", cfg.horizon)));
        }
    }
    let raw = load_csv(csv)?;
    if raw.num_channels() != ck.channels.len() {
        return Err(mlf_core::MlfError::ShapeMismatch { op: "forecast channels", left: vec![raw.num_channels()], right: vec![ck.channels.len()] }.into());
    }
    let longest = cfg.longest();
    if raw.len() < longest {
        return Err(mlf_core::MlfError::Data(format!(
            "forecast needs {longest} rows of history, file has {}",
            raw.len()
        ))
        .into());
    }
    let data = ck.standardizer.transform(&raw)?;
    let c = data.num_channels();
    let end = data.len();
    let windows = cfg
        .period_lengths
        .iter()
        .map(|&n| (0..c).flat_map(|ch| data.column(ch, end - n..end)).collect())
        .collect();
    let batch = Batch {
        size: c,
        windows,
        target: Vec::new(),
    };
    let pred = model.predict(&batch)?;
    let m = cfg.horizon;
    let rows = (0..m)
        .map(|h| {
            (0..c)
                .map(|ch| ck.standardizer.denormalize(pred.forecast.data()[ch * m + h], ch))
                .collect::<std::result::Result<Vec<f64>, _>>()
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((raw.channels.clone(), rows))
}

pub fn cmd_forecast(checkpoint: &Path, csv: &Path, horizon: Option<usize>, path: &Path, out: &mut impl Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (channels, rows) = forecast_rows(&ck, csv, horizon)?;
    let mut header = vec!["step".to_string()];
    header.extend(channels);
    let n = rows.len();
    write_csv(
        path,
        &header,
        rows.into_iter().enumerate().map(|(h, r)| {
            let mut row = vec![(h + 1).to_string()];
            row.extend(r.iter().map(f64::to_string));
            row
        }),
    )?;
    writeln!(out, "wrote {n} forecast rows to {}", path.display()).ok();
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, flags: &[String], seeds: u64, out: &mut impl Write) -> Result<()> {
    let flags = normalize_flags(flags)?;
    write_snapshot(cfg)?;
    let prep = prepare(cfg)?;
    let seed_list: Vec<u64> = (0..seeds.max(1)).map(|i| cfg.seed + i).collect();
    let report = ablate(cfg, &prep, &flags, &seed_list, |name, seed, r| {
        writeln!(out, "{name:<10} seed {seed}: mse {:.6} mae {:.6}", r.normalized.mse, r.normalized.mae).ok();
    })?;
    let text = report.to_text();
    write_file(
        &cfg.output_dir.join("ablation.json"),
        &serde_json::to_string_pretty(&report).expect("json"),
    )?;
    write_file(&cfg.output_dir.join("ablation.txt"), &text)?;
    write!(out, "{text}").ok();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_repeated_sets_and_flag_lists() {
        let cli = Cli::try_parse_from([
            "mlf", "ablate", "-c", "c.json", "--set", "seed=3", "--set", "model.epochs=1", "--flags", "irf,lwi", "--seeds", "3",
        ])
        .unwrap();
        let Command::Ablate { run, flags, seeds } = cli.command else { panic!("wrong command") };
        assert_eq!(run.overrides, ["seed=3", "model.epochs=1"]);
        assert_eq!(flags, ["irf", "lwi"]);
        assert_eq!(seeds, 3);
    }

    #[test]
    fn eval_defaults_to_the_test_split() {
        let cli = Cli::try_parse_from(["mlf", "eval", "-c", "c.json", "--checkpoint", "k.json"]).unwrap();
        let Command::Eval { split, naive, .. } = cli.command else { panic!("wrong command") };
        assert!(matches!(Split::from(split), Split::Test));
        assert!(!naive);
    }

    #[test]
    fn synth_kind_uses_kebab_case() {
        assert!(Cli::try_parse_from(["mlf", "synth-data", "--synth", "regime-switch", "-o", "x.csv"]).is_ok());
        assert!(Cli::try_parse_from(["mlf", "synth-data", "--synth", "regime_switch", "-o", "x.csv"]).is_err());
    }
}
