//! Waveform to 3×256×256 spectral image.
//!
//! The chain is `stft_magnitude` (257×257) → `trim_and_normalize`
//! (256×256 in `[0, 1]`) → `to_heatmap` (3×256×256 in `[0, 1]`).
//! Everything here runs in `f64` and is a pure function of the input.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{Waveform, TARGET_LEN};
use crate::error::{Error, Result};

pub const WINDOW_SIZE: usize = 512;
pub const HOP: usize = 256;
pub const FREQ_BINS: usize = WINDOW_SIZE / 2 + 1;
pub const FRAMES: usize = 1 + TARGET_LEN / HOP;
pub const IMAGE_SIZE: usize = 256;

/// Nonnegative STFT magnitudes, `[freq_bins, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f64>,
}

/// Three-channel image, `[3, 256, 256]`, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroImage {
    pub channels: Array3<f64>,
}

impl SpectroImage {
    pub fn new(channels: Array3<f64>) -> Result<Self> {
        if channels.dim() != (3, IMAGE_SIZE, IMAGE_SIZE) {
            return Err(Error::ShapeMismatch(format!(
                "spectro image must be 3x{IMAGE_SIZE}x{IMAGE_SIZE}, got {:?}",
                channels.shape()
            )));
        }
        if let Some(v) = channels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("image entry {v} outside [0, 1]")));
        }
        Ok(Self { channels })
    }

    /// Flat `[3 * 256 * 256]` copy in channel-major order.
    pub fn to_f32(&self) -> Vec<f32> {
        self.channels.iter().map(|&v| v as f32).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        rgb_to_png(&self.channels, path)
    }
}

/// Writes a `[3, H, W]` grid with entries in `[0, 1]` as 8-bit RGB,
/// `round(v * 255)` per channel. Values outside `[0, 1]` are clamped.
pub fn rgb_to_png(rgb: &Array3<f64>, path: &Path) -> Result<()> {
    rgb_to_image(rgb)?.save(path)?;
    Ok(())
}

pub fn rgb_to_image(rgb: &Array3<f64>) -> Result<image::RgbImage> {
    let (c, h, w) = rgb.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (rgb[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reflect-pads `x` by `pad` on each side (mirror without repeating the edge).
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    (-(pad as isize)..n + pad as isize)
        .map(|i| {
            let mut j = i;
            // bounce until inside; lengths here are always far larger than pad
            while j < 0 || j >= n {
                j = if j < 0 { -j } else { 2 * (n - 1) - j };
            }
            x[j as usize]
        })
        .collect()
}

/// Center-padded (reflect) Hann STFT magnitude.
pub fn stft_magnitude(w: &Waveform, window_size: usize, hop: usize) -> Result<Spectrogram> {
    if w.len() != TARGET_LEN {
        return Err(Error::ShapeMismatch(format!(
            "stft expects {TARGET_LEN} samples, got {}",
            w.len()
        )));
    }
    if window_size < 2 || hop == 0 || window_size / 2 >= w.len() {
        return Err(Error::InvalidArgument(format!(
            "bad stft geometry window={window_size} hop={hop}"
        )));
    }
    let bins = window_size / 2 + 1;
    let frames = 1 + w.len() / hop;
    let x: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
    let padded = reflect_pad(&x, window_size / 2);
    let win = hann(window_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_size);
    let mut buf = vec![Complex::new(0.0, 0.0); window_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = Array2::<f64>::zeros((bins, frames));
    for t in 0..frames {
        let frame = &padded[t * hop..t * hop + window_size];
        for ((b, &s), &h) in buf.iter_mut().zip(frame).zip(&win) {
            *b = Complex::new(s * h, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for f in 0..bins {
            values[[f, t]] = buf[f].norm();
        }
    }
    Ok(Spectrogram { values })
}

/// Drops the last frequency row and the last time column, applies
/// `log(1 + v)` and min-max scales to `[0, 1]`. A constant grid maps to
/// all zeros.
pub fn trim_and_normalize(s: &Spectrogram) -> Result<Array2<f64>> {
    if s.values.dim() != (FREQ_BINS, FRAMES) {
        return Err(Error::ShapeMismatch(format!(
            "expected {FREQ_BINS}x{FRAMES} spectrogram, got {:?}",
            s.values.shape()
        )));
    }
    let g = s.values.slice(s![..IMAGE_SIZE, ..IMAGE_SIZE]).mapv(f64::ln_1p);
    let (lo, hi) = g
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Ok(Array2::zeros((IMAGE_SIZE, IMAGE_SIZE)));
    }
    let span = hi - lo;
    Ok(g.mapv(|v| (v - lo) / span))
}

/// The jet-like colormap applied to one value.
pub fn heat_rgb(v: f64) -> [f64; 3] {
    let c = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [c(3.0), c(2.0), c(1.0)]
}

pub fn to_heatmap(g: ArrayView2<f64>) -> Result<SpectroImage> {
    if g.dim() != (IMAGE_SIZE, IMAGE_SIZE) {
        return Err(Error::ShapeMismatch(format!(
            "heatmap input must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {:?}",
            g.shape()
        )));
    }
    if let Some(v) = g.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange(format!("grid value {v} outside [0, 1]")));
    }
    let mut out = Array3::<f64>::zeros((3, IMAGE_SIZE, IMAGE_SIZE));
    for ((i, j), &v) in g.indexed_iter() {
        let rgb = heat_rgb(v);
        for (c, x) in rgb.into_iter().enumerate() {
            out[[c, i, j]] = x;
        }
    }
    Ok(SpectroImage { channels: out })
}

pub fn featurize(w: &Waveform) -> Result<SpectroImage> {
    let spec = stft_magnitude(w, WINDOW_SIZE, HOP)?;
    let grid = trim_and_normalize(&spec)?;
    to_heatmap(grid.view())
}
