//! Reconstruction pretraining and joint detection training.

mod data;
mod fad;
mod pretrain;

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::audio::Label;
use crate::error::{Error, Result};
use crate::features::SpectroImage;
use crate::nn::{Graph, Tensor, Var};
use crate::recolor::QuantizedImage;

pub use data::{utterance_image, FeatureBank};
pub use fad::{fad_train, EpochRecord, FadOptions, FadReport, RecolorInit, TrainState, BEST_CHECKPOINT, LOG_FILE};
pub use pretrain::{pretrain, reconstruction_mse, PretrainOptions, PretrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecMode {
    /// Reconstruction loss on bona fide samples only.
    TrueRec,
    /// Reconstruction loss on every sample.
    AllRec,
}

impl fmt::Display for RecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecMode::TrueRec => "true_rec",
            RecMode::AllRec => "all_rec",
        })
    }
}

impl FromStr for RecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true_rec" => Ok(RecMode::TrueRec),
            "all_rec" => Ok(RecMode::AllRec),
            other => Err(Error::InvalidArgument(format!("unknown rec mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub rec_mode: RecMode,
    /// Weight of the gated reconstruction term.
    pub rec_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rec_mode: RecMode::TrueRec,
            rec_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rec_weight >= 0.0 && self.rec_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reconstruction weight must be nonnegative, got {}",
                self.rec_weight
            )));
        }
        Ok(())
    }
}

fn mse(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {:?} vs original {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Mean squared error over every entry.
pub fn reconstruction_loss(recon: &QuantizedImage, original: &SpectroImage) -> Result<f64> {
    mse(&recon.channels, &original.channels)
}

/// Mean of the per-sample MSEs over the samples selected by `mode`; zero
/// when `true_rec` sees no bona fide sample.
pub fn gated_reconstruction_loss(
    recons: &[Array3<f64>],
    originals: &[Array3<f64>],
    labels: &[Label],
    mode: RecMode,
) -> Result<f64> {
    if recons.len() != originals.len() || recons.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch lengths differ: {} reconstructions, {} originals, {} labels",
            recons.len(),
            originals.len(),
            labels.len()
        )));
    }
    let per_sample = recons
        .iter()
        .zip(originals)
        .map(|(r, o)| mse(r, o))
        .collect::<Result<Vec<f64>>>()?;
    Ok(gate_mean(&per_sample, labels, mode))
}

fn gate_mean(per_sample: &[f64], labels: &[Label], mode: RecMode) -> f64 {
    let selected: Vec<f64> = per_sample
        .iter()
        .zip(labels)
        .filter(|(_, &l)| mode == RecMode::AllRec || l == Label::Bonafide)
        .map(|(&v, _)| v)
        .collect();
    if selected.is_empty() {
        0.0
    } else {
        selected.iter().sum::<f64>() / selected.len() as f64
    }
}

/// Graph form of the gated loss over a `[N]` vector of per-sample MSEs.
pub fn gated_loss_var(g: &mut Graph, per_sample: Var, labels: &[Label], mode: RecMode) -> Var {
    let mask: Vec<f32> = labels
        .iter()
        .map(|&l| if mode == RecMode::AllRec || l == Label::Bonafide { 1.0 } else { 0.0 })
        .collect();
    let count: f32 = mask.iter().sum();
    let n = mask.len();
    let m = g.input(Tensor::new(&[n], mask));
    let masked = g.mul(per_sample, m);
    let total = g.sum_all(masked);
    g.scale(total, if count > 0.0 { 1.0 / count } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recolor::QuantPath;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.0..1.0))
    }

    fn spectro(c: Array3<f64>) -> SpectroImage {
        SpectroImage { channels: c }
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_img(&mut rng);
        let q = QuantizedImage {
            channels: x.clone(),
            path: QuantPath::Test,
        };
        assert_eq!(reconstruction_loss(&q, &spectro(x)).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_its_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_img(&mut rng);
        let q = QuantizedImage {
            channels: &x + 0.1,
            path: QuantPath::Train,
        };
        assert!((reconstruction_loss(&q, &spectro(x)).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn random_pair_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (rand_img(&mut rng), rand_img(&mut rng));
        let mut s = 0.0;
        for c in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    s += (a[[c, i, j]] - b[[c, i, j]]).powi(2);
                }
            }
        }
        let q = QuantizedImage {
            channels: a,
            path: QuantPath::Train,
        };
        assert!((reconstruction_loss(&q, &spectro(b)).unwrap() - s / 192.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let q = QuantizedImage {
            channels: Array3::zeros((3, 4, 4)),
            path: QuantPath::Train,
        };
        assert!(reconstruction_loss(&q, &spectro(Array3::zeros((3, 8, 8)))).is_err());
        assert!(gated_reconstruction_loss(&[Array3::zeros((3, 2, 2))], &[], &[Label::Spoof], RecMode::AllRec).is_err());
    }

    #[test]
    fn gating_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let recons: Vec<_> = (0..5).map(|_| rand_img(&mut rng)).collect();
        let originals: Vec<_> = (0..5).map(|_| rand_img(&mut rng)).collect();
        let labels = [Label::Spoof, Label::Bonafide, Label::Spoof, Label::Bonafide, Label::Spoof];
        let per: Vec<f64> = recons.iter().zip(&originals).map(|(r, o)| mse(r, o).unwrap()).collect();

        let all_spoof = [Label::Spoof; 5];
        assert_eq!(gated_reconstruction_loss(&recons, &originals, &all_spoof, RecMode::TrueRec).unwrap(), 0.0);

        let all = gated_reconstruction_loss(&recons, &originals, &labels, RecMode::AllRec).unwrap();
        assert!((all - per.iter().sum::<f64>() / 5.0).abs() < 1e-12);

        let t = gated_reconstruction_loss(&recons, &originals, &labels, RecMode::TrueRec).unwrap();
        assert!((t - (per[1] + per[3]) / 2.0).abs() < 1e-12);

        // spoof reconstructions do not matter under true_rec
        let mut changed = recons.clone();
        changed[0].fill(0.0);
        changed[4].fill(1.0);
        assert_eq!(gated_reconstruction_loss(&changed, &originals, &labels, RecMode::TrueRec).unwrap(), t);
    }

    #[test]
    fn graph_gate_matches_domain_gate() {
        let labels = [Label::Bonafide, Label::Spoof, Label::Bonafide];
        let per = [0.5f32, 2.0, 0.25];
        for mode in [RecMode::TrueRec, RecMode::AllRec] {
            let mut g = Graph::new(true);
            let v = g.leaf(Tensor::new(&[3], per.to_vec()));
            let loss = gated_loss_var(&mut g, v, &labels, mode);
            let want = gate_mean(&per.map(|v| v as f64), &labels, mode);
            assert!((g.value(loss).item() as f64 - want).abs() < 1e-7);
        }
        let mut g = Graph::new(true);
        let v = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
        let loss = gated_loss_var(&mut g, v, &[Label::Spoof, Label::Spoof], RecMode::TrueRec);
        assert_eq!(g.value(loss).item(), 0.0);
    }
}
