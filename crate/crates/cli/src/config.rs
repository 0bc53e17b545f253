//! Flat `key = value` run configuration.
//!
//! Layering, lowest to highest: built-in defaults, a config file, then
//! `--set key=value` and dedicated flags. The resolved config is written
//! next to every run's outputs as `config.txt` and can be fed back with
//! `--config` to repeat the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use recolor_core::audio::{manifest_from_dir, parse_protocol, AudioLayout, CorpusManifest, Label, Partition};
use recolor_core::classifiers::{default_width, ClassifierConfig, ClassifierKind, FusionMode};
use recolor_core::recolor::{QuantPath, RecolorConfig};
use recolor_core::training::{FadOptions, LossConfig, PretrainOptions, RecMode, RecolorInit};

use crate::CliError;

/// Overrides `corpus_root`.
pub const CORPUS_ROOT_ENV: &str = "RECOLOR_CORPUS_ROOT";
pub const SNAPSHOT_FILE: &str = "config.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusPaths {
    /// Five-column protocol file.
    pub protocol: Option<PathBuf>,
    /// Audio directory; defaults to `wav/` next to the protocol.
    pub audio: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus_root: Option<PathBuf>,
    pub train: CorpusPaths,
    pub dev: CorpusPaths,
    pub eval: CorpusPaths,
    /// Bona fide entries of this protocol are used for pretraining.
    pub pretrain: CorpusPaths,
    /// Alternatively, every wav/flac under this directory.
    pub pretrain_dir: Option<PathBuf>,
    pub audio_ext: String,

    pub recolor: RecolorConfig,
    pub loss: LossConfig,
    pub classifier: ClassifierConfig,
    pub fusion: FusionMode,
    pub init: RecolorInit,
    pub freeze_recolor: bool,
    pub detach_cls: bool,
    pub class_weighting: bool,
    pub score_path: QuantPath,

    pub lr: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub bn_momentum: f32,
    pub seed: u64,
    pub cache_limit: usize,

    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f32,
    pub grid_every: usize,

    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fad = FadOptions::default();
        let pre = PretrainOptions::default();
        Self {
            corpus_root: None,
            train: CorpusPaths::default(),
            dev: CorpusPaths::default(),
            eval: CorpusPaths::default(),
            pretrain: CorpusPaths::default(),
            pretrain_dir: None,
            audio_ext: "wav".into(),
            recolor: fad.recolor,
            loss: fad.loss,
            classifier: fad.classifier,
            fusion: fad.fusion,
            init: fad.init,
            freeze_recolor: fad.freeze_recolor,
            detach_cls: fad.detach_cls,
            class_weighting: fad.class_weighting,
            score_path: fad.score_path,
            lr: fad.lr,
            batch_size: fad.batch_size,
            max_epochs: fad.max_epochs,
            patience: fad.patience,
            bn_momentum: fad.bn_momentum,
            seed: fad.seed,
            cache_limit: fad.cache_limit,
            pretrain_steps: pre.steps,
            pretrain_batch_size: pre.batch_size,
            pretrain_lr: pre.lr,
            grid_every: 200,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("bad value {value:?} for {key}, expected true or false"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "corpus_root",
        "train_protocol",
        "train_audio",
        "dev_protocol",
        "dev_audio",
        "eval_protocol",
        "eval_audio",
        "pretrain_protocol",
        "pretrain_audio",
        "pretrain_dir",
        "audio_ext",
        "colors",
        "temperature",
        "encoder_channels",
        "recolor_seed",
        "rec_mode",
        "rec_weight",
        "classifier",
        "classifier_width",
        "classifier_seed",
        "fusion",
        "init",
        "freeze_recolor",
        "detach_cls",
        "class_weighting",
        "score_path",
        "lr",
        "batch_size",
        "max_epochs",
        "patience",
        "bn_momentum",
        "seed",
        "cache_limit",
        "pretrain_steps",
        "pretrain_batch_size",
        "pretrain_lr",
        "grid_every",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key {
            "corpus_root" => self.corpus_root = opt_path(value),
            "train_protocol" => self.train.protocol = opt_path(value),
            "train_audio" => self.train.audio = opt_path(value),
            "dev_protocol" => self.dev.protocol = opt_path(value),
            "dev_audio" => self.dev.audio = opt_path(value),
            "eval_protocol" => self.eval.protocol = opt_path(value),
            "eval_audio" => self.eval.audio = opt_path(value),
            "pretrain_protocol" => self.pretrain.protocol = opt_path(value),
            "pretrain_audio" => self.pretrain.audio = opt_path(value),
            "pretrain_dir" => self.pretrain_dir = opt_path(value),
            "audio_ext" => self.audio_ext = value.trim_start_matches('.').to_string(),
            "colors" => self.recolor.num_colors = parse(key, value)?,
            "temperature" => self.recolor.temperature = parse(key, value)?,
            "encoder_channels" => {
                self.recolor.encoder_channels = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_, _>>()?
            }
            "recolor_seed" => self.recolor.seed = parse(key, value)?,
            "rec_mode" => self.loss.rec_mode = value.parse::<RecMode>()?,
            "rec_weight" => self.loss.rec_weight = parse(key, value)?,
            "classifier" => {
                let kind: ClassifierKind = value.parse()?;
                if kind != self.classifier.kind {
                    self.classifier.width = default_width(kind);
                }
                self.classifier.kind = kind;
            }
            "classifier_width" => self.classifier.width = parse(key, value)?,
            "classifier_seed" => self.classifier.seed = parse(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "init" => self.init = value.parse()?,
            "freeze_recolor" => self.freeze_recolor = parse_bool(key, value)?,
            "detach_cls" => self.detach_cls = parse_bool(key, value)?,
            "class_weighting" => self.class_weighting = parse_bool(key, value)?,
            "score_path" => self.score_path = value.parse()?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "cache_limit" => self.cache_limit = parse(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "pretrain_batch_size" => self.pretrain_batch_size = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "grid_every" => self.grid_every = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "corpus_root" => show_path(&self.corpus_root),
            "train_protocol" => show_path(&self.train.protocol),
            "train_audio" => show_path(&self.train.audio),
            "dev_protocol" => show_path(&self.dev.protocol),
            "dev_audio" => show_path(&self.dev.audio),
            "eval_protocol" => show_path(&self.eval.protocol),
            "eval_audio" => show_path(&self.eval.audio),
            "pretrain_protocol" => show_path(&self.pretrain.protocol),
            "pretrain_audio" => show_path(&self.pretrain.audio),
            "pretrain_dir" => show_path(&self.pretrain_dir),
            "audio_ext" => self.audio_ext.clone(),
            "colors" => self.recolor.num_colors.to_string(),
            "temperature" => self.recolor.temperature.to_string(),
            "encoder_channels" => self
                .recolor
                .encoder_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "recolor_seed" => self.recolor.seed.to_string(),
            "rec_mode" => self.loss.rec_mode.to_string(),
            "rec_weight" => self.loss.rec_weight.to_string(),
            "classifier" => self.classifier.kind.to_string(),
            "classifier_width" => self.classifier.width.to_string(),
            "classifier_seed" => self.classifier.seed.to_string(),
            "fusion" => self.fusion.to_string(),
            "init" => self.init.to_string(),
            "freeze_recolor" => self.freeze_recolor.to_string(),
            "detach_cls" => self.detach_cls.to_string(),
            "class_weighting" => self.class_weighting.to_string(),
            "score_path" => self.score_path.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "bn_momentum" => self.bn_momentum.to_string(),
            "seed" => self.seed.to_string(),
            "cache_limit" => self.cache_limit.to_string(),
            "pretrain_steps" => self.pretrain_steps.to_string(),
            "pretrain_batch_size" => self.pretrain_batch_size.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "grid_every" => self.grid_every.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// Applies every `key = value` line; blank lines and `#` comments are
    /// skipped.
    pub fn apply_text(&mut self, text: &str, source: &Path) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| CliError::Config(format!("{}: line {}: {e}", source.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, path)
    }

    /// Applies the corpus-root environment override, if set.
    pub fn apply_env(&mut self) {
        if let Ok(root) = std::env::var(CORPUS_ROOT_ENV) {
            self.corpus_root = opt_path(&root);
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("listed key")).expect("string write");
        }
        out
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.recolor.validate()?;
        self.loss.validate()?;
        if self.classifier.width == 0 {
            return Err(CliError::Config("classifier_width must be positive".into()));
        }
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("pretrain_batch_size", self.pretrain_batch_size),
        ] {
            if v == 0 {
                return Err(CliError::Config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("{k} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Relative corpus paths are taken from `corpus_root` when it is set.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.corpus_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn corpus(&self, partition: Partition) -> &CorpusPaths {
        match partition {
            Partition::Train => &self.train,
            Partition::Dev => &self.dev,
            Partition::Eval => &self.eval,
            Partition::Pretrain => &self.pretrain,
        }
    }

    pub fn manifest(&self, partition: Partition) -> Result<CorpusManifest, CliError> {
        let paths = self.corpus(partition);
        let name = format!("{partition:?}").to_lowercase();
        let protocol = paths
            .protocol
            .as_ref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| CliError::Config(format!("{name}_protocol is not set")))?;
        if !protocol.is_file() {
            return Err(CliError::Config(format!("{name} protocol {} not found", protocol.display())));
        }
        let audio = match &paths.audio {
            Some(a) => self.resolve(a),
            None => protocol.parent().unwrap_or(Path::new(".")).join("wav"),
        };
        Ok(parse_protocol(&protocol, partition, &AudioLayout::new(audio, &self.audio_ext))?)
    }

    /// Bona fide speech for reconstruction pretraining.
    pub fn pretrain_manifest(&self) -> Result<CorpusManifest, CliError> {
        if let Some(dir) = &self.pretrain_dir {
            let m = manifest_from_dir(&self.resolve(dir), Partition::Pretrain)?;
            if m.is_empty() {
                return Err(CliError::Config(format!("no audio files under {}", dir.display())));
            }
            return Ok(m);
        }
        let mut m = self.manifest(Partition::Pretrain)?;
        m.records.retain(|r| r.label == Label::Bonafide);
        Ok(m)
    }

    pub fn fad_options(&self, out_dir: Option<PathBuf>) -> FadOptions {
        FadOptions {
            recolor: self.recolor.clone(),
            classifier: self.classifier.clone(),
            fusion: self.fusion,
            loss: self.loss.clone(),
            init: self.init.clone(),
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            bn_momentum: self.bn_momentum,
            freeze_recolor: self.freeze_recolor,
            detach_cls: self.detach_cls,
            class_weighting: self.class_weighting,
            score_path: self.score_path,
            cache_limit: self.cache_limit,
            out_dir,
        }
    }

    pub fn pretrain_options(&self, out_dir: Option<PathBuf>) -> PretrainOptions {
        PretrainOptions {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch_size,
            lr: self.pretrain_lr,
            seed: self.seed,
            bn_momentum: self.bn_momentum,
            grid_every: self.grid_every,
            out_dir,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.set_pair("colors=2").unwrap();
        c.set_pair("temperature = 0.001").unwrap();
        c.set_pair("encoder_channels=8,16").unwrap();
        c.set_pair("init=pretrained:runs/pre/recolor.ckpt").unwrap();
        c.set_pair("classifier=aasist").unwrap();
        c.set_pair("train_protocol=toy/protocol.txt").unwrap();
        c.set_pair("detach_cls=true").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), Path::new("snap")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(c.to_text().lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn every_key_is_readable_and_writable() {
        let c = RunConfig::default();
        for key in RunConfig::KEYS {
            let v = c.get(key).unwrap();
            let mut d = RunConfig::default();
            d.set(key, &v).unwrap_or_else(|e| panic!("{key}: {e}"));
            assert_eq!(d, c, "{key}");
        }
    }

    #[test]
    fn bad_entries_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set_pair("colours=2").is_err());
        assert!(c.set_pair("colors").is_err());
        assert!(c.set_pair("colors=two").is_err());
        assert!(c.set_pair("fusion=mul").is_err());
        assert!(c.set_pair("freeze_recolor=maybe").is_err());
        let e = c.apply_text("# comment\n\nseed = 3\nbogus = 1\n", Path::new("x.conf")).unwrap_err();
        assert!(e.to_string().contains("line 4"), "{e}");
        assert_eq!(c.seed, 3);
        c.set_pair("temperature=0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn relative_paths_follow_corpus_root() {
        let mut c = RunConfig::default();
        assert_eq!(c.resolve(Path::new("a/b")), PathBuf::from("a/b"));
        c.set_pair("corpus_root=/data/LA").unwrap();
        assert_eq!(c.resolve(Path::new("a/b")), PathBuf::from("/data/LA/a/b"));
        assert_eq!(c.resolve(Path::new("/abs")), PathBuf::from("/abs"));
    }
}
