//! Feature fusion and the three detection back-ends.
//!
//! Every classifier takes a `[N,3,256,256]` batch, standardizes each
//! channel plane internally and returns `[N,2]` logits ordered
//! (bona fide, spoof). The detection score is their difference, so higher
//! means more bona fide.

mod aasist;
mod lcnn;
mod resnet;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::IMAGE_SIZE;
use crate::nn::{Graph, Init, ParamStore, Tensor, Var};

pub use aasist::Aasist;
pub use lcnn::Lcnn;
pub use resnet::ResNet18;

/// Name prefix of classifier parameters inside a shared store.
pub const PARAM_PREFIX: &str = "cls.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    OnlyRec,
    Add,
    Sub,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::OnlyRec => "only_rec",
            FusionMode::Add => "add",
            FusionMode::Sub => "sub",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "only_rec" => Ok(FusionMode::OnlyRec),
            "add" => Ok(FusionMode::Add),
            "sub" => Ok(FusionMode::Sub),
            other => Err(Error::InvalidArgument(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Combines the original image with its reconstruction. No clamping.
pub fn fuse(original: &Array3<f64>, recon: &Array3<f64>, mode: FusionMode) -> Result<Array3<f64>> {
    if original.dim() != recon.dim() {
        return Err(Error::ShapeMismatch(format!(
            "fusion of {:?} with {:?}",
            original.shape(),
            recon.shape()
        )));
    }
    Ok(match mode {
        FusionMode::OnlyRec => recon.clone(),
        FusionMode::Add => original + recon,
        FusionMode::Sub => original - recon,
    })
}

/// Graph form of [`fuse`].
pub fn fuse_var(g: &mut Graph, original: Var, recon: Var, mode: FusionMode) -> Var {
    match mode {
        FusionMode::OnlyRec => recon,
        FusionMode::Add => g.add(original, recon),
        FusionMode::Sub => g.sub(original, recon),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Lcnn,
    Resnet18,
    Aasist,
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Lcnn => "lcnn",
            ClassifierKind::Resnet18 => "resnet18",
            ClassifierKind::Aasist => "aasist",
        })
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lcnn" => Ok(ClassifierKind::Lcnn),
            "resnet18" => Ok(ClassifierKind::Resnet18),
            "aasist" => Ok(ClassifierKind::Aasist),
            other => Err(Error::InvalidArgument(format!("unknown classifier {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    /// Base channel width; each architecture scales its stages from it.
    pub width: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(kind: ClassifierKind) -> Self {
        Self {
            kind,
            width: default_width(kind),
            seed: 0,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("classifier".into(), self.kind.to_string());
        m.insert("classifier_width".into(), self.width.to_string());
        m.insert("classifier_seed".into(), self.seed.to_string());
        m
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Config(format!("missing key {k}")));
        let bad = |k: &str| Error::Config(format!("bad value for {k}"));
        Ok(Self {
            kind: get("classifier")?.parse()?,
            width: get("classifier_width")?.parse().map_err(|_| bad("classifier_width"))?,
            seed: get("classifier_seed")?.parse().map_err(|_| bad("classifier_seed"))?,
        })
    }
}

/// Desk-scale default widths. Full-size runs use 32 (LCNN), 64 (ResNet18)
/// and 32 (AASIST).
pub fn default_width(kind: ClassifierKind) -> usize {
    match kind {
        ClassifierKind::Lcnn => 8,
        ClassifierKind::Resnet18 => 8,
        ClassifierKind::Aasist => 8,
    }
}

#[derive(Clone, Debug)]
pub enum Classifier {
    Lcnn(Lcnn),
    Resnet18(ResNet18),
    Aasist(Aasist),
}

impl Classifier {
    /// Registers parameters under [`PARAM_PREFIX`], initialized from
    /// `cfg.seed`.
    pub fn new(cfg: &ClassifierConfig, store: &mut ParamStore) -> Result<Self> {
        if cfg.width == 0 {
            return Err(Error::InvalidArgument("classifier width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init { rng: &mut rng };
        Ok(match cfg.kind {
            ClassifierKind::Lcnn => Classifier::Lcnn(Lcnn::new(store, &mut init, "cls", cfg.width)),
            ClassifierKind::Resnet18 => Classifier::Resnet18(ResNet18::new(store, &mut init, "cls", cfg.width)),
            ClassifierKind::Aasist => Classifier::Aasist(Aasist::new(store, &mut init, "cls", cfg.width)),
        })
    }

    /// `[N,3,256,256]` → logits `[N,2]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let x = g.instance_norm(x);
        match self {
            Classifier::Lcnn(m) => m.forward(g, store, x),
            Classifier::Resnet18(m) => m.forward(g, store, x),
            Classifier::Aasist(m) => m.forward(g, store, x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierOutput {
    /// (bona fide, spoof)
    pub logits: [f64; 2],
    pub score: f64,
}

/// Splits `[N,2]` logits into per-sample outputs.
pub fn outputs_from_logits(t: &Tensor) -> Vec<ClassifierOutput> {
    t.data()
        .chunks(2)
        .map(|c| {
            let logits = [c[0] as f64, c[1] as f64];
            ClassifierOutput {
                logits,
                score: logits[0] - logits[1],
            }
        })
        .collect()
}

/// A classifier owning its parameters, for standalone inference.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub cfg: ClassifierConfig,
    pub net: Classifier,
    pub store: ParamStore,
}

impl ClassifierModel {
    pub fn new(cfg: &ClassifierConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Classifier::new(cfg, &mut store)?;
        Ok(Self {
            cfg: cfg.clone(),
            net,
            store,
        })
    }

    pub fn forward(&self, f: &Array3<f64>) -> Result<ClassifierOutput> {
        if f.dim() != (3, IMAGE_SIZE, IMAGE_SIZE) {
            return Err(Error::ShapeMismatch(format!(
                "classifier input must be 3x{IMAGE_SIZE}x{IMAGE_SIZE}, got {:?}",
                f.shape()
            )));
        }
        let mut g = Graph::new(false);
        let x = g.input(Tensor::new(
            &[1, 3, IMAGE_SIZE, IMAGE_SIZE],
            f.iter().map(|&v| v as f32).collect(),
        ));
        let logits = self.net.forward(&mut g, &self.store, x);
        Ok(outputs_from_logits(g.value(logits))[0])
    }
}

#[cfg(test)]
mod tests;
