use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::FeatureBank;
use super::{gated_loss_var, LossConfig};
use crate::audio::{CorpusManifest, Label};
use crate::checkpoint::Checkpoint;
use crate::classifiers::{fuse_var, outputs_from_logits, Classifier, ClassifierConfig, ClassifierOutput, FusionMode};
use crate::error::{Error, Result};
use crate::eval::{compute_eer, ScoreSet};
use crate::nn::{Adam, Graph, ParamStore, Tensor, Var};
use crate::recolor::{load_recolor_params, QuantPath, RecolorConfig, RecolorNet};

pub const CHECKPOINT_KIND: &str = "fad";
pub const LOG_FILE: &str = "train.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
/// Batch size used for scoring; fixed so scores never depend on the
/// training batch size.
const SCORE_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RecolorInit {
    Scratch,
    Pretrained(PathBuf),
}

impl fmt::Display for RecolorInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecolorInit::Scratch => f.write_str("scratch"),
            RecolorInit::Pretrained(p) => write!(f, "pretrained:{}", p.display()),
        }
    }
}

impl FromStr for RecolorInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "scratch" {
            return Ok(RecolorInit::Scratch);
        }
        match s.strip_prefix("pretrained:") {
            Some(p) if !p.is_empty() => Ok(RecolorInit::Pretrained(PathBuf::from(p))),
            _ => Err(Error::InvalidArgument(format!(
                "init must be `scratch` or `pretrained:PATH`, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FadOptions {
    pub recolor: RecolorConfig,
    pub classifier: ClassifierConfig,
    pub fusion: FusionMode,
    pub loss: LossConfig,
    pub init: RecolorInit,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best dev EER.
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub bn_momentum: f32,
    /// Keep the recolor model fixed (normalization in evaluation mode).
    pub freeze_recolor: bool,
    /// Stop the classification loss at the classifier input, so only the
    /// reconstruction term trains the recolor model.
    pub detach_cls: bool,
    /// Weight the cross-entropy by inverse class frequency.
    pub class_weighting: bool,
    /// Quantization path used when scoring.
    pub score_path: QuantPath,
    /// Features of at most this many utterances stay in memory.
    pub cache_limit: usize,
    /// Directory for `train.log` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
}

impl Default for FadOptions {
    fn default() -> Self {
        Self {
            recolor: RecolorConfig::default(),
            classifier: ClassifierConfig::new(crate::classifiers::ClassifierKind::Lcnn),
            fusion: FusionMode::Sub,
            loss: LossConfig::default(),
            init: RecolorInit::Scratch,
            max_epochs: 100,
            patience: 10,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            bn_momentum: 0.1,
            freeze_recolor: false,
            detach_cls: false,
            class_weighting: false,
            score_path: QuantPath::Test,
            cache_limit: 20_000,
            out_dir: None,
        }
    }
}

/// Recolor model and classifier sharing one parameter store.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub recolor: RecolorNet,
    pub classifier: Classifier,
    pub classifier_cfg: ClassifierConfig,
    pub fusion: FusionMode,
    pub score_path: QuantPath,
    pub store: ParamStore,
}

struct LossGraph {
    g: Graph,
    total: Var,
    cls: Var,
    rec: Var,
}

impl TrainState {
    pub fn new(recolor: &RecolorConfig, classifier: &ClassifierConfig, fusion: FusionMode, score_path: QuantPath) -> Result<Self> {
        let mut store = ParamStore::new();
        let recolor_net = RecolorNet::new(recolor, &mut store)?;
        let classifier_net = Classifier::new(classifier, &mut store)?;
        Ok(Self {
            step: 0,
            epoch: 0,
            seed: 0,
            recolor: recolor_net,
            classifier: classifier_net,
            classifier_cfg: classifier.clone(),
            fusion,
            score_path,
            store,
        })
    }

    /// Fresh state for `opts`, with recolor weights from a pretraining
    /// checkpoint when requested.
    pub fn from_options(opts: &FadOptions) -> Result<Self> {
        let mut state = Self::new(&opts.recolor, &opts.classifier, opts.fusion, opts.score_path)?;
        state.seed = opts.seed;
        if let RecolorInit::Pretrained(path) = &opts.init {
            let ckpt = Checkpoint::load(path)?;
            load_recolor_params(&mut state.store, &opts.recolor, &ckpt, path)?;
        }
        Ok(state)
    }

    pub fn recolor_cfg(&self) -> &RecolorConfig {
        &self.recolor.cfg
    }

    pub fn config_map(&self) -> BTreeMap<String, String> {
        let mut m = self.recolor.cfg.to_map();
        m.extend(self.classifier_cfg.to_map());
        m.insert("fusion".into(), self.fusion.to_string());
        m.insert("score_path".into(), self.score_path.to_string());
        m.insert("step".into(), self.step.to_string());
        m.insert("epoch".into(), self.epoch.to_string());
        m.insert("train_seed".into(), self.seed.to_string());
        m
    }

    /// Logits `[N,2]` of a `[N,3,256,256]` batch, normalization in
    /// evaluation mode.
    pub fn logits(&self, x: Tensor) -> Tensor {
        let mut g = Graph::new(false);
        let input = g.input(x);
        let recon = self.recolor.forward(&mut g, &self.store, input, self.score_path).image;
        let fused = fuse_var(&mut g, input, recon, self.fusion);
        let logits = self.classifier.forward(&mut g, &self.store, fused);
        g.value(logits).clone()
    }

    pub fn score_batch(&self, x: Tensor) -> Vec<ClassifierOutput> {
        outputs_from_logits(&self.logits(x))
    }

    /// Scores every utterance of `bank` in record order.
    pub fn score_bank(&self, bank: &mut FeatureBank) -> Result<ScoreSet> {
        let mut set = ScoreSet::default();
        let idx: Vec<usize> = (0..bank.len()).collect();
        for chunk in idx.chunks(SCORE_BATCH) {
            let outs = self.score_batch(bank.batch(chunk)?);
            for (&i, o) in chunk.iter().zip(outs) {
                let rec = &bank.records()[i];
                set.push(rec.utt_id.clone(), rec.label, o.score);
            }
        }
        Ok(set)
    }

    pub fn score_manifest(&self, manifest: &CorpusManifest) -> Result<ScoreSet> {
        self.score_bank(&mut FeatureBank::new(manifest.records.clone(), 0))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(CHECKPOINT_KIND, self.config_map(), &self.store, "")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(bad(format!("expected a {CHECKPOINT_KIND:?} checkpoint, found {:?}", ckpt.kind)));
        }
        let value = |k: &str| ckpt.config_value(k).ok_or_else(|| bad(format!("missing config key {k}")));
        let number = |k: &str| -> Result<usize> { value(k)?.parse().map_err(|_| bad(format!("bad value for {k}"))) };
        let recolor = RecolorConfig::from_map(&ckpt.config)?;
        let classifier = ClassifierConfig::from_map(&ckpt.config)?;
        let mut state = Self::new(&recolor, &classifier, value("fusion")?.parse()?, value("score_path")?.parse()?)?;
        state.step = number("step")?;
        state.epoch = number("epoch")?;
        state.seed = value("train_seed")?.parse().map_err(|_| bad("bad value for train_seed".into()))?;
        let loaded = state.store.load_from(&ckpt.tensors, "")?;
        if loaded != state.store.len() || loaded != ckpt.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint {} has {} tensors, model has {}, matched {loaded}",
                path.display(),
                ckpt.tensors.len(),
                state.store.len()
            )));
        }
        Ok(state)
    }

    /// Total loss `CE + λ·gated MSE` of one training batch.
    fn loss_graph(&self, x: Tensor, labels: &[Label], class_weights: [f32; 2], opts: &FadOptions) -> LossGraph {
        let mut g = Graph::new(true);
        let input = g.input(x);
        let recon = if opts.freeze_recolor {
            let mut fg = Graph::new(false);
            let fi = fg.input(g.value(input).clone());
            let image = self.recolor.forward(&mut fg, &self.store, fi, QuantPath::Train).image;
            g.input(fg.value(image).clone())
        } else {
            self.recolor.forward(&mut g, &self.store, input, QuantPath::Train).image
        };
        let cls_in = if opts.detach_cls { g.detach(recon) } else { recon };
        let fused = fuse_var(&mut g, input, cls_in, opts.fusion);
        let logits = self.classifier.forward(&mut g, &self.store, fused);
        let targets: Vec<usize> = labels.iter().map(|l| l.class_index()).collect();
        let weights: Vec<f32> = targets.iter().map(|&c| class_weights[c]).collect();
        let cls = g.cross_entropy(logits, &targets, &weights);
        let per = g.mse_per_sample(recon, input);
        let rec = gated_loss_var(&mut g, per, labels, opts.loss.rec_mode);
        let weighted = g.scale(rec, opts.loss.rec_weight as f32);
        let total = g.add(cls, weighted);
        LossGraph { g, total, cls, rec }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub loss_cls: f64,
    pub loss_rec: f64,
    pub dev_eer: f64,
}

pub struct FadReport {
    /// State at the epoch with the lowest dev EER.
    pub best: TrainState,
    pub best_dev_eer: f64,
    pub best_dev_scores: ScoreSet,
    pub history: Vec<EpochRecord>,
}

fn check_two_classes(m: &CorpusManifest, what: &str) -> Result<()> {
    let (b, s) = (m.count(Label::Bonafide), m.count(Label::Spoof));
    if b == 0 || s == 0 {
        return Err(Error::InvalidArgument(format!(
            "{what} set needs both classes, found {b} bonafide and {s} spoof"
        )));
    }
    Ok(())
}

fn validate(opts: &FadOptions) -> Result<()> {
    opts.recolor.validate()?;
    opts.loss.validate()?;
    if opts.batch_size == 0 || opts.max_epochs == 0 {
        return Err(Error::InvalidArgument("batch size and epoch count must be positive".into()));
    }
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", opts.lr)));
    }
    Ok(())
}

/// Jointly trains recolor model and classifier on `train`, selecting the
/// epoch with the lowest EER on `dev`.
pub fn fad_train(train: &CorpusManifest, dev: &CorpusManifest, opts: &FadOptions) -> Result<FadReport> {
    validate(opts)?;
    check_two_classes(train, "training")?;
    check_two_classes(dev, "development")?;
    let mut state = TrainState::from_options(opts)?;
    let mut train_bank = FeatureBank::new(train.records.clone(), opts.cache_limit);
    let mut dev_bank = FeatureBank::new(dev.records.clone(), opts.cache_limit);
    let labels: Vec<Label> = train.records.iter().map(|r| r.label).collect();
    let n = labels.len();
    let class_weights = if opts.class_weighting {
        let nb = train.count(Label::Bonafide) as f32;
        let ns = train.count(Label::Spoof) as f32;
        [n as f32 / (2.0 * nb), n as f32 / (2.0 * ns)]
    } else {
        [1.0, 1.0]
    };
    let per_epoch = n.div_ceil(opts.batch_size);
    let mut adam = Adam::new(opts.lr).with_cosine(opts.max_epochs * per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut best: Option<(TrainState, f64, ScoreSet)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum_cls, mut sum_rec) = (0.0, 0.0);
        for chunk in order.chunks(opts.batch_size) {
            let x = train_bank.batch(chunk)?;
            let batch_labels: Vec<Label> = chunk.iter().map(|&i| labels[i]).collect();
            let mut lg = state.loss_graph(x, &batch_labels, class_weights, opts);
            let total = lg.g.value(lg.total).item();
            let (cls, rec) = (lg.g.value(lg.cls).item() as f64, lg.g.value(lg.rec).item() as f64);
            if !total.is_finite() {
                let ids: Vec<&str> = chunk.iter().map(|&i| train.records[i].utt_id.as_str()).collect();
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    detail: format!("loss_cls={cls} loss_rec={rec} batch=[{}]", ids.join(", ")),
                });
            }
            let grads = lg.g.backward(lg.total);
            let pg = lg.g.param_grads(&grads);
            let running = lg.g.take_running_updates();
            adam.step(&mut state.store, &pg);
            state.store.apply_running_updates(&running, opts.bn_momentum);
            state.step += 1;
            sum_cls += cls * chunk.len() as f64;
            sum_rec += rec * chunk.len() as f64;
        }
        state.epoch = epoch + 1;
        let scores = state.score_bank(&mut dev_bank)?;
        let dev_eer = compute_eer(&scores)?.eer;
        let rec = EpochRecord {
            epoch: state.epoch,
            step: state.step,
            loss_cls: sum_cls / n as f64,
            loss_rec: sum_rec / n as f64,
            dev_eer,
        };
        log::info!(
            "epoch {} step {} loss_cls {:.5} loss_rec {:.5} dev_eer {:.4}",
            rec.epoch,
            rec.step,
            rec.loss_cls,
            rec.loss_rec,
            rec.dev_eer
        );
        if let Some(w) = log.as_mut() {
            writeln!(w, "{} {} {} {}", rec.step, rec.loss_cls, rec.loss_rec, rec.dev_eer)?;
            w.flush()?;
        }
        history.push(rec);
        if best.as_ref().is_none_or(|(_, e, _)| dev_eer < *e) {
            if let Some(dir) = &opts.out_dir {
                state.save(&dir.join(BEST_CHECKPOINT))?;
            }
            best = Some((state.clone(), dev_eer, scores));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break;
            }
        }
    }
    let (best, best_dev_eer, best_dev_scores) = best.expect("at least one epoch ran");
    Ok(FadReport {
        best,
        best_dev_eer,
        best_dev_scores,
        history,
    })
}
