//! Command-line workflows: synthesize a toy corpus, pretrain the recolor
//! model, train and evaluate detectors, sweep experiment grids and render
//! reconstruction panels.

pub mod config;
mod grid;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use recolor_core::audio::{fix_length, load_waveform_at, synth_toy_corpus, LengthMode, Partition, SAMPLE_RATE, TARGET_LEN};
use recolor_core::eval::{compute_eer, det_points, format_eer_percent, write_det_csv, write_scores};
use recolor_core::features::featurize;
use recolor_core::recolor::{QuantPath, RecolorModel};
use recolor_core::training::{fad_train, pretrain, TrainState, BEST_CHECKPOINT};
use recolor_core::viz::save_panel_grid;
use thiserror::Error;

pub use config::RunConfig;

pub const RECOLOR_CHECKPOINT: &str = "recolor.ckpt";
pub const DEV_SCORES: &str = "dev_scores.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] recolor_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Parser)]
#[command(name = "recolor", version, about = "Recolor-based reconstruction features for fake audio detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-class corpus (WAV files plus protocol).
    SynthData {
        /// Utterances per class.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the recolor model to reconstruct clean speech images.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recolor: RecolorFlags,
        #[arg(long)]
        steps: Option<usize>,
        /// Directory of bona fide wav/flac files.
        #[arg(long)]
        pretrain_dir: Option<PathBuf>,
        /// Protocol whose bona fide entries are used.
        #[arg(long)]
        pretrain_protocol: Option<PathBuf>,
    },
    /// Jointly train recolor model and classifier; keep the best dev-EER state.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recolor: RecolorFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Score an evaluation protocol with a trained checkpoint and print the EER.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation protocol.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Score file; defaults to `<out>/scores.txt`.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Also write DET operating points as CSV.
        #[arg(long)]
        det: Option<PathBuf>,
    },
    /// Train and score every cell of an experiment grid.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Comma-separated colour counts.
        #[arg(long)]
        colors: Option<String>,
        #[arg(long)]
        fusion: Option<String>,
        #[arg(long)]
        classifier: Option<String>,
        /// Width for every classifier of the grid; each back-end's default
        /// otherwise.
        #[arg(long)]
        classifier_width: Option<usize>,
        #[arg(long)]
        rec_mode: Option<String>,
        /// `scratch` and/or `pretrained:PATH`; `{colors}` in PATH is
        /// replaced by the cell's colour count.
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Render original | train-path | test-path panels per checkpoint and segment.
    Visualize {
        /// Recolor or detector checkpoints, one panel row each.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, required = true)]
        audio: Vec<PathBuf>,
        /// Random segments per utterance.
        #[arg(long, default_value_t = 1)]
        segments: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RecolorFlags {
    #[arg(long)]
    pub colors: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub classifier: Option<String>,
    /// Applied after `--classifier`, which otherwise resets the width to
    /// that back-end's default.
    #[arg(long)]
    pub classifier_width: Option<usize>,
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub rec_mode: Option<String>,
    #[arg(long)]
    pub rec_weight: Option<f64>,
    /// `scratch` or `pretrained:PATH`.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub freeze_recolor: bool,
    #[arg(long)]
    pub detach_cls: bool,
    #[arg(long)]
    pub class_weighting: bool,
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Defaults, then config file, environment, `--set` pairs and flags.
fn resolve_config(common: &Common, flags: Vec<(&str, Option<String>)>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env();
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    let mut flags = flags;
    flags.push(("out_dir", path_str(&common.out)));
    flags.push(("seed", common.seed.map(|s| s.to_string())));
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn recolor_flags(r: &RecolorFlags) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("colors", r.colors.map(|v| v.to_string())),
        ("temperature", r.temperature.map(|v| v.to_string())),
    ]
}

fn model_flags(m: &ModelFlags) -> Vec<(&'static str, Option<String>)> {
    let on = |b: bool| b.then(|| "true".to_string());
    vec![
        ("classifier", m.classifier.clone()),
        ("classifier_width", m.classifier_width.map(|v| v.to_string())),
        ("fusion", m.fusion.clone()),
        ("rec_mode", m.rec_mode.clone()),
        ("rec_weight", m.rec_weight.map(|v| v.to_string())),
        ("init", m.init.clone()),
        ("max_epochs", m.epochs.map(|v| v.to_string())),
        ("batch_size", m.batch_size.map(|v| v.to_string())),
        ("lr", m.lr.map(|v| v.to_string())),
        ("freeze_recolor", on(m.freeze_recolor)),
        ("detach_cls", on(m.detach_cls)),
        ("class_weighting", on(m.class_weighting)),
    ]
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData { n, seed, out } => {
            let m = synth_toy_corpus(n as usize, seed, &out)?;
            println!(
                "wrote {} utterances ({n} bonafide, {n} spoof) to {}",
                m.len(),
                out.display()
            );
            println!("protocol: {}", out.join(recolor_core::audio::TOY_PROTOCOL_FILE).display());
        }
        Command::Pretrain {
            common,
            recolor,
            steps,
            pretrain_dir,
            pretrain_protocol,
        } => {
            let mut flags = recolor_flags(&recolor);
            flags.push(("pretrain_steps", steps.map(|s| s.to_string())));
            flags.push(("pretrain_dir", path_str(&pretrain_dir)));
            flags.push(("pretrain_protocol", path_str(&pretrain_protocol)));
            let cfg = resolve_config(&common, flags)?;
            cmd_pretrain(&cfg)?;
        }
        Command::Train {
            common,
            recolor,
            model,
            train,
            dev,
        } => {
            let mut flags = recolor_flags(&recolor);
            flags.extend(model_flags(&model));
            flags.push(("train_protocol", path_str(&train)));
            flags.push(("dev_protocol", path_str(&dev)));
            let cfg = resolve_config(&common, flags)?;
            let eer = cmd_train(&cfg)?;
            println!("best dev EER: {}%", format_eer_percent(eer));
        }
        Command::Eval {
            common,
            checkpoint,
            eval,
            scores,
            det,
        } => {
            let cfg = resolve_config(&common, vec![("eval_protocol", path_str(&eval))])?;
            let scores = scores.unwrap_or_else(|| cfg.out_dir.join("scores.txt"));
            let eer = cmd_eval(&cfg, &checkpoint, &scores, det.as_deref())?;
            println!("scores: {}", scores.display());
            println!("EER: {}%", format_eer_percent(eer));
        }
        Command::Grid {
            common,
            colors,
            fusion,
            classifier,
            classifier_width,
            rec_mode,
            init,
            train,
            dev,
            eval,
        } => {
            let cfg = resolve_config(
                &common,
                vec![
                    ("train_protocol", path_str(&train)),
                    ("dev_protocol", path_str(&dev)),
                    ("eval_protocol", path_str(&eval)),
                ],
            )?;
            let mut axes = grid::Axes::from_flags(&cfg, [colors, fusion, classifier, rec_mode, init])?;
            axes.classifier_width = classifier_width;
            let table = grid::run_grid(&cfg, &axes)?;
            print!("{table}");
        }
        Command::Visualize {
            checkpoint,
            audio,
            segments,
            out,
        } => {
            cmd_visualize(&checkpoint, &audio, segments, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let manifest = cfg.pretrain_manifest()?;
    if manifest.is_empty() {
        return Err(CliError::Config("pretraining set has no bona fide utterances".into()));
    }
    cfg.write_snapshot(&cfg.out_dir)?;
    let report = pretrain(&manifest, &cfg.recolor, &cfg.pretrain_options(Some(cfg.out_dir.clone())))?;
    let path = cfg.out_dir.join(RECOLOR_CHECKPOINT);
    report.model.save(&path)?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        println!("loss {first:.6} -> {last:.6} over {} steps", report.losses.len());
    }
    println!("checkpoint: {}", path.display());
    Ok(path)
}

/// Returns the best dev EER.
pub fn cmd_train(cfg: &RunConfig) -> Result<f64, CliError> {
    let train = cfg.manifest(Partition::Train)?;
    let dev = cfg.manifest(Partition::Dev)?;
    cfg.write_snapshot(&cfg.out_dir)?;
    let report = fad_train(&train, &dev, &cfg.fad_options(Some(cfg.out_dir.clone())))?;
    write_scores(&report.best_dev_scores, &cfg.out_dir.join(DEV_SCORES))?;
    log::info!(
        "best checkpoint {} (epoch {})",
        cfg.out_dir.join(BEST_CHECKPOINT).display(),
        report.best.epoch
    );
    Ok(report.best_dev_eer)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, scores: &Path, det: Option<&Path>) -> Result<f64, CliError> {
    if !checkpoint.is_file() {
        return Err(CliError::Config(format!("checkpoint {} not found", checkpoint.display())));
    }
    let state = TrainState::load(checkpoint)?;
    let manifest = cfg.manifest(Partition::Eval)?;
    let set = state.score_manifest(&manifest)?;
    if let Some(dir) = scores.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_scores(&set, scores)?;
    let eer = compute_eer(&set)?;
    if let Some(path) = det {
        write_det_csv(&det_points(&set)?, path)?;
    }
    Ok(eer.eer)
}

pub fn cmd_visualize(checkpoints: &[PathBuf], audio: &[PathBuf], segments: u64, out: &Path) -> Result<(), CliError> {
    if segments == 0 {
        return Err(CliError::Config("segments must be at least 1".into()));
    }
    let models = checkpoints
        .iter()
        .map(|p| RecolorModel::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for model in &models {
        for path in audio {
            let w = load_waveform_at(path, SAMPLE_RATE)?;
            for seg in 0..segments {
                let x = featurize(&fix_length(&w, TARGET_LEN, LengthMode::CropRandom, seg)?)?;
                rows.push(vec![
                    x.channels.clone(),
                    model.forward(&x, QuantPath::Train).channels,
                    model.forward(&x, QuantPath::Test).channels,
                ]);
            }
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_panel_grid(&rows, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_config(args: &[&str]) -> RunConfig {
        let cli = Cli::try_parse_from([&["recolor", "train"], args].concat()).unwrap();
        let Command::Train { common, recolor, model, .. } = cli.command else {
            unreachable!()
        };
        let mut flags = recolor_flags(&recolor);
        flags.extend(model_flags(&model));
        resolve_config(&common, flags).unwrap()
    }

    #[test]
    fn width_flag_survives_a_classifier_switch() {
        let cfg = train_config(&["--classifier", "resnet18", "--classifier-width", "3"]);
        assert_eq!(cfg.get("classifier_width").as_deref(), Some("3"));
        // a --set width is applied before the kind flag, which resets it
        let cfg = train_config(&["--classifier", "resnet18", "--set", "classifier_width=3"]);
        assert_ne!(cfg.get("classifier_width").as_deref(), Some("3"));
        let cfg = train_config(&["--set", "classifier=aasist", "--set", "classifier_width=5", "--lr", "0.01"]);
        assert_eq!(cfg.get("classifier_width").as_deref(), Some("5"));
        assert_eq!(cfg.get("lr").as_deref(), Some("0.01"));
    }
}
