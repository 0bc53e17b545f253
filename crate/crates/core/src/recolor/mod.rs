//! The colour-quantization reconstruction model.
//!
//! A pixel-mapping encoder scores every pixel against K colour slots and a
//! palette module proposes the K colours. The train path blends the
//! palette with a temperature softmax; the test path picks the argmax
//! colour, which is the one-hot × palette product done as a gather.

pub mod kernels;
mod net;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{SpectroImage, IMAGE_SIZE};
use crate::nn::{Graph, Init, ParamStore, Tensor, Var};

pub use net::{PaletteModule, PixelEncoder};

pub const CHECKPOINT_KIND: &str = "recolor";
/// Name prefix of every recolor parameter inside a shared store.
pub const PARAM_PREFIX: &str = "recolor.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecolorConfig {
    pub num_colors: usize,
    pub temperature: f64,
    pub encoder_channels: Vec<usize>,
    pub seed: u64,
}

impl Default for RecolorConfig {
    fn default() -> Self {
        Self {
            num_colors: 16,
            temperature: 0.01,
            encoder_channels: vec![16, 32, 64],
            seed: 0,
        }
    }
}

impl RecolorConfig {
    pub fn new(num_colors: usize, temperature: f64) -> Self {
        Self {
            num_colors,
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_colors == 0 {
            return Err(Error::InvalidArgument("number of colors must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::InvalidArgument("encoder channels must be a non-empty list of positive widths".into()));
        }
        if !IMAGE_SIZE.is_multiple_of(1 << self.encoder_channels.len()) {
            return Err(Error::InvalidArgument("too many encoder stages for a 256x256 input".into()));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("num_colors".into(), self.num_colors.to_string());
        m.insert("temperature".into(), self.temperature.to_string());
        m.insert("encoder_channels".into(), join_usize(&self.encoder_channels));
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Config(format!("missing key {k}")));
        let bad = |k: &str| Error::Config(format!("bad value for {k}"));
        let cfg = Self {
            num_colors: get("num_colors")?.parse().map_err(|_| bad("num_colors"))?,
            temperature: get("temperature")?.parse().map_err(|_| bad("temperature"))?,
            encoder_channels: parse_usize_list(get("encoder_channels")?).ok_or_else(|| bad("encoder_channels"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn join_usize(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_usize_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

/// Per-pixel K-way logits, `[K, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassActivationMap {
    pub scores: Array3<f64>,
}

/// K colours, `[K, 3]`, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub colors: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantPath {
    Train,
    Test,
}

impl std::fmt::Display for QuantPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QuantPath::Train => "train",
            QuantPath::Test => "test",
        })
    }
}

impl std::str::FromStr for QuantPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(QuantPath::Train),
            "test" => Ok(QuantPath::Test),
            other => Err(Error::InvalidArgument(format!("unknown quantization path {other:?}"))),
        }
    }
}

/// Reconstructed image, `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedImage {
    pub channels: Array3<f64>,
    pub path: QuantPath,
}

fn check_pair(a: &ClassActivationMap, p: &Palette) -> Result<(usize, usize, usize)> {
    let (k, h, w) = a.scores.dim();
    if p.colors.dim() != (k, 3) {
        return Err(Error::ShapeMismatch(format!(
            "activation map has {k} channels, palette has shape {:?}",
            p.colors.shape()
        )));
    }
    if k == 0 {
        return Err(Error::ShapeMismatch("zero colour channels".into()));
    }
    Ok((k, h, w))
}

/// Softmax over `a / τ` per pixel, blended with the palette.
pub fn quantize_train(a: &ClassActivationMap, p: &Palette, tau: f64) -> Result<QuantizedImage> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let (k, h, w) = check_pair(a, p)?;
    let logits: Vec<f64> = a.scores.iter().copied().collect();
    let palette: Vec<f64> = p.colors.iter().copied().collect();
    let mut out = vec![0.0; 3 * h * w];
    let mut weights = vec![0.0; k * h * w];
    kernels::soft_assign(&logits, &palette, k, h * w, tau, &mut out, &mut weights);
    Ok(QuantizedImage {
        channels: Array3::from_shape_vec((3, h, w), out).expect("shape"),
        path: QuantPath::Train,
    })
}

/// Argmax colour per pixel (ties go to the lowest index).
pub fn quantize_test(a: &ClassActivationMap, p: &Palette) -> Result<QuantizedImage> {
    let (k, h, w) = check_pair(a, p)?;
    let logits: Vec<f64> = a.scores.iter().copied().collect();
    let palette: Vec<f64> = p.colors.iter().copied().collect();
    let mut out = vec![0.0; 3 * h * w];
    kernels::hard_assign(&logits, &palette, k, h * w, &mut out);
    Ok(QuantizedImage {
        channels: Array3::from_shape_vec((3, h, w), out).expect("shape"),
        path: QuantPath::Test,
    })
}

/// Colour index map, `[H, W]`.
pub fn color_index_map(a: &ClassActivationMap) -> Array2<usize> {
    let (k, h, w) = a.scores.dim();
    let logits: Vec<f64> = a.scores.iter().copied().collect();
    Array2::from_shape_vec((h, w), kernels::argmax_index(&logits, k, h * w)).expect("shape")
}

/// One-hot encoding of an index map, `[H*W, K]`.
pub fn one_hot(index: &Array2<usize>, k: usize) -> Array2<f64> {
    let mut m = Array2::zeros((index.len(), k));
    for (p, &c) in index.iter().enumerate() {
        m[[p, c]] = 1.0;
    }
    m
}

pub fn count_unique_colors(q: ArrayView3<f64>) -> usize {
    let (_, h, w) = q.dim();
    let mut seen = HashSet::new();
    for i in 0..h {
        for j in 0..w {
            // adding 0.0 folds -0.0 into 0.0 so equal colours hash equally
            seen.insert([0, 1, 2].map(|c| (q[[c, i, j]] + 0.0).to_bits()));
        }
    }
    seen.len()
}

/// Graph outputs of one recolor pass.
#[derive(Clone, Copy, Debug)]
pub struct RecolorVars {
    /// `[N,K,H,W]`
    pub logits: Var,
    /// `[N,K,3]`
    pub palette: Var,
    /// `[N,3,H,W]`
    pub image: Var,
}

/// Encoder and palette module registered in some [`ParamStore`].
#[derive(Clone, Debug)]
pub struct RecolorNet {
    pub cfg: RecolorConfig,
    encoder: PixelEncoder,
    pam: PaletteModule,
}

impl RecolorNet {
    /// Registers all parameters under `PARAM_PREFIX`, initialized from
    /// `cfg.seed`.
    pub fn new(cfg: &RecolorConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init { rng: &mut rng };
        let encoder = PixelEncoder::new(store, &mut init, "recolor.enc", cfg);
        let pam = PaletteModule::new(store, &mut init, "recolor.pam", cfg);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            pam,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, path: QuantPath) -> RecolorVars {
        let logits = self.encoder.forward(g, store, x);
        let palette = self.pam.forward(g, store, x);
        let image = match path {
            QuantPath::Train => g.quantize_soft(logits, palette, self.cfg.temperature as f32),
            QuantPath::Test => g.quantize_hard(logits, palette),
        };
        RecolorVars { logits, palette, image }
    }
}

/// Stacks images into a `[N,3,256,256]` batch tensor.
pub fn batch_tensor(images: &[&SpectroImage]) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * 3 * IMAGE_SIZE * IMAGE_SIZE);
    for im in images {
        data.extend(im.channels.iter().map(|&v| v as f32));
    }
    Tensor::new(&[images.len(), 3, IMAGE_SIZE, IMAGE_SIZE], data)
}

fn sample_array3(t: &Tensor, i: usize) -> Array3<f64> {
    let s = t.sample(i);
    let sh = s.shape().to_vec();
    Array3::from_shape_vec((sh[0], sh[1], sh[2]), s.data().iter().map(|&v| v as f64).collect()).expect("shape")
}

/// A standalone recolor model owning its parameters; inference runs with
/// normalization layers in evaluation mode.
#[derive(Clone, Debug)]
pub struct RecolorModel {
    pub net: RecolorNet,
    pub store: ParamStore,
}

impl RecolorModel {
    pub fn new(cfg: &RecolorConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = RecolorNet::new(cfg, &mut store)?;
        Ok(Self { net, store })
    }

    pub fn cfg(&self) -> &RecolorConfig {
        &self.net.cfg
    }

    fn run(&self, x: &SpectroImage, path: QuantPath) -> (Graph, RecolorVars) {
        let mut g = Graph::new(false);
        let input = g.input(batch_tensor(&[x]));
        let vars = self.net.forward(&mut g, &self.store, input, path);
        (g, vars)
    }

    pub fn encode_activation(&self, x: &SpectroImage) -> ClassActivationMap {
        let mut g = Graph::new(false);
        let input = g.input(batch_tensor(&[x]));
        let logits = self.net.encoder.forward(&mut g, &self.store, input);
        ClassActivationMap {
            scores: sample_array3(g.value(logits), 0),
        }
    }

    pub fn acquire_palette(&self, x: &SpectroImage) -> Palette {
        let mut g = Graph::new(false);
        let input = g.input(batch_tensor(&[x]));
        let p = self.net.pam.forward(&mut g, &self.store, input);
        let t = g.value(p);
        Palette {
            colors: Array2::from_shape_vec((t.dim(1), 3), t.data().iter().map(|&v| v as f64).collect()).expect("shape"),
        }
    }

    pub fn forward(&self, x: &SpectroImage, path: QuantPath) -> QuantizedImage {
        let (g, vars) = self.run(x, path);
        QuantizedImage {
            channels: sample_array3(g.value(vars.image), 0),
            path,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_store(CHECKPOINT_KIND, self.cfg().to_map(), &self.store, PARAM_PREFIX).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        Self::from_checkpoint(&ckpt, path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<Self> {
        let cfg = RecolorConfig::from_map(&ckpt.config)?;
        let mut model = Self::new(&cfg)?;
        load_recolor_params(&mut model.store, &cfg, ckpt, path)?;
        Ok(model)
    }
}

/// Copies the recolor tensors of `ckpt` into `store`, which must already
/// hold a recolor net built from `expected`. Fails on a colour-count or any
/// tensor-shape mismatch.
pub fn load_recolor_params(store: &mut ParamStore, expected: &RecolorConfig, ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if ckpt.kind != CHECKPOINT_KIND && !ckpt.tensors.iter().any(|(n, _)| n.starts_with(PARAM_PREFIX)) {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("holds a {:?} model without recolor parameters", ckpt.kind),
        });
    }
    if let Some(k) = ckpt.config_value("num_colors") {
        if k != expected.num_colors.to_string() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint {} has {k} colors, run expects {}",
                path.display(),
                expected.num_colors
            )));
        }
    }
    let recolor: Vec<(String, Tensor)> = ckpt
        .tensors
        .iter()
        .filter(|(n, _)| n.starts_with(PARAM_PREFIX))
        .cloned()
        .collect();
    let loaded = store.load_from(&recolor, "")?;
    let wanted = store.named().filter(|(n, _)| n.starts_with(PARAM_PREFIX)).count();
    if loaded != wanted {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint {} provides {loaded} of {wanted} recolor tensors",
            path.display()
        )));
    }
    Ok(())
}

/// Per-sample view of a `[N,3,H,W]` graph value.
pub fn image_from_tensor(t: &Tensor, i: usize) -> Array3<f64> {
    sample_array3(t, i)
}
