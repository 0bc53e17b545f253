use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::utterance_image;
use crate::audio::{CorpusManifest, LengthMode};
use crate::error::{Error, Result};
use crate::features::SpectroImage;
use crate::nn::{Adam, Graph, Tensor};
use crate::recolor::{batch_tensor, image_from_tensor, QuantPath, RecolorConfig, RecolorModel};
use crate::viz::save_panel_grid;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub bn_momentum: f32,
    /// Write a reconstruction grid every this many steps (0 disables).
    pub grid_every: usize,
    /// Directory for `pretrain_loss.log`, grids and failure dumps.
    pub out_dir: Option<PathBuf>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            bn_momentum: 0.1,
            grid_every: 0,
            out_dir: None,
        }
    }
}

pub struct PretrainReport {
    pub model: RecolorModel,
    /// Training-batch loss of every step, before that step's update.
    pub losses: Vec<f64>,
}

/// Mean train- or test-path MSE over `images`, normalization in inference
/// mode.
pub fn reconstruction_mse(model: &RecolorModel, images: &[SpectroImage], path: QuantPath) -> f64 {
    let total: f64 = images
        .iter()
        .map(|x| {
            let q = model.forward(x, path);
            let d = &q.channels - &x.channels;
            d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
        })
        .sum();
    total / images.len().max(1) as f64
}

/// Trains a fresh recolor model to reproduce random-crop spectral images
/// through its train path.
pub fn pretrain(manifest: &CorpusManifest, cfg: &RecolorConfig, opts: &PretrainOptions) -> Result<PretrainReport> {
    if manifest.is_empty() {
        return Err(Error::InvalidArgument("pretraining manifest is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut model = RecolorModel::new(cfg)?;
    let mut adam = Adam::new(opts.lr).with_cosine(opts.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("pretrain_loss.log"))?))
        }
        None => None,
    };
    let preview: Vec<SpectroImage> = if opts.grid_every > 0 && opts.out_dir.is_some() {
        manifest
            .records
            .iter()
            .take(2)
            .map(|r| utterance_image(r, LengthMode::CropFixed, 0))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let picks: Vec<(usize, u64)> = (0..opts.batch_size)
            .map(|_| (rng.gen_range(0..manifest.len()), rng.gen::<u64>()))
            .collect();
        let images = picks
            .iter()
            .map(|&(i, crop)| utterance_image(&manifest.records[i], LengthMode::CropRandom, crop))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&SpectroImage> = images.iter().collect();
        let x = batch_tensor(&refs);

        let mut g = Graph::new(true);
        let input = g.input(x);
        let out = model.net.forward(&mut g, &model.store, input, QuantPath::Train);
        let per = g.mse_per_sample(out.image, input);
        let loss = g.mean_all(per);
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            let detail = describe_batch(manifest, &picks, g.value(input));
            if let Some(dir) = &opts.out_dir {
                fs::write(dir.join(format!("nonfinite_step{step}.txt")), &detail)?;
            }
            return Err(Error::NonFiniteLoss { step, detail });
        }
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        let running = g.take_running_updates();
        adam.step(&mut model.store, &pg);
        model.store.apply_running_updates(&running, opts.bn_momentum);
        losses.push(value);
        if let Some(w) = log.as_mut() {
            writeln!(w, "{step} {value}")?;
        }
        if opts.grid_every > 0 && (step + 1) % opts.grid_every == 0 {
            if let Some(dir) = &opts.out_dir {
                save_panel_grid(
                    &triplets(&model, &preview),
                    &dir.join(format!("grid_step{:06}.png", step + 1)),
                )?;
            }
        }
        log::debug!("pretrain step {step} loss {value:.6}");
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    Ok(PretrainReport { model, losses })
}

/// `[original, train path, test path]` per image.
pub(crate) fn triplets(model: &RecolorModel, images: &[SpectroImage]) -> Vec<Vec<ndarray::Array3<f64>>> {
    images
        .iter()
        .map(|x| {
            vec![
                x.channels.clone(),
                model.forward(x, QuantPath::Train).channels,
                model.forward(x, QuantPath::Test).channels,
            ]
        })
        .collect()
}

fn describe_batch(manifest: &CorpusManifest, picks: &[(usize, u64)], x: &Tensor) -> String {
    let mut s = String::new();
    for (b, &(i, crop)) in picks.iter().enumerate() {
        let img = image_from_tensor(x, b);
        let (lo, hi) = img
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let nonfinite = img.iter().filter(|v| !v.is_finite()).count();
        s.push_str(&format!(
            "{} crop_seed={crop} min={lo} max={hi} nonfinite={nonfinite}\n",
            manifest.records[i].utt_id
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::synth_toy_corpus;

    fn tiny_cfg() -> RecolorConfig {
        RecolorConfig {
            num_colors: 4,
            temperature: 0.01,
            encoder_channels: vec![4, 8],
            seed: 1,
        }
    }

    #[test]
    fn one_step_moves_parameters_and_reruns_match() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_toy_corpus(2, 3, dir.path()).unwrap();
        let opts = PretrainOptions {
            steps: 2,
            batch_size: 2,
            lr: 1e-3,
            out_dir: Some(dir.path().join("run")),
            grid_every: 2,
            ..Default::default()
        };
        let a = pretrain(&m, &tiny_cfg(), &opts).unwrap();
        let fresh = RecolorModel::new(&tiny_cfg()).unwrap();
        let moved = fresh
            .store
            .named()
            .zip(a.model.store.named())
            .any(|((_, x), (_, y))| x != y);
        assert!(moved);
        let b = pretrain(&m, &tiny_cfg(), &PretrainOptions { out_dir: None, ..opts.clone() }).unwrap();
        assert_eq!(a.losses, b.losses);
        let log = fs::read_to_string(dir.path().join("run/pretrain_loss.log")).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(dir.path().join("run/grid_step000002.png").is_file());
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let m = CorpusManifest {
            partition: crate::audio::Partition::Pretrain,
            records: vec![],
        };
        assert!(pretrain(&m, &tiny_cfg(), &PretrainOptions::default()).is_err());
    }
}
