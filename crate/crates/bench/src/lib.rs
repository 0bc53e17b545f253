//! Seeded inputs shared by the benchmarks.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recolor_core::audio::{Label, Waveform, SAMPLE_RATE, TARGET_LEN};
use recolor_core::eval::ScoreSet;
use recolor_core::features::{SpectroImage, IMAGE_SIZE};
use recolor_core::recolor::{ClassActivationMap, Palette};

pub fn waveform(seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..TARGET_LEN).map(|_| rng.gen_range(-0.5..0.5)).collect(), SAMPLE_RATE)
}

pub fn image(seed: u64) -> SpectroImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpectroImage {
        channels: Array3::from_shape_fn((3, IMAGE_SIZE, IMAGE_SIZE), |_| rng.gen_range(0.0..1.0)),
    }
}

pub fn activation_and_palette(k: usize, seed: u64) -> (ClassActivationMap, Palette) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = Array3::from_shape_fn((k, IMAGE_SIZE, IMAGE_SIZE), |_| rng.gen_range(-1.0..1.0));
    let colors = ndarray::Array2::from_shape_fn((k, 3), |_| rng.gen_range(0.0..1.0));
    (ClassActivationMap { scores }, Palette { colors })
}

/// `n` scores per class from two overlapping uniform ranges.
pub fn scores(n: usize, seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ScoreSet::default();
    for i in 0..n {
        s.push(format!("b{i}"), Label::Bonafide, rng.gen_range(-1.0..2.0));
        s.push(format!("s{i}"), Label::Spoof, rng.gen_range(-2.0..1.0));
    }
    s
}
