use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthMode {
    /// Tile short audio; take the prefix of long audio.
    PadRepeat,
    /// Prefix of long audio; short audio is tiled.
    CropFixed,
    /// Seeded uniformly random window of long audio; short audio is tiled.
    CropRandom,
}

/// Forces `w` to exactly `target` samples. Short input is always
/// repeat-tiled; long input is cropped according to `mode`.
pub fn fix_length(w: &Waveform, target: usize, mode: LengthMode, seed: u64) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("cannot fix the length of an empty waveform".into()));
    }
    if target == 0 {
        return Err(Error::InvalidArgument("target length must be positive".into()));
    }
    let n = w.len();
    let samples = if n == target {
        w.samples.clone()
    } else if n < target {
        w.samples.iter().cycle().take(target).copied().collect()
    } else {
        let offset = match mode {
            LengthMode::PadRepeat | LengthMode::CropFixed => 0,
            LengthMode::CropRandom => ChaCha8Rng::seed_from_u64(seed).gen_range(0..=n - target),
        };
        w.samples[offset..offset + target].to_vec()
    };
    Ok(Waveform::new(samples, w.sample_rate))
}

/// Decodes a WAV or FLAC file, averages channels to mono and peak-normalizes
/// to `[-1, 1]` (`x / max(|x|, 1e-9)`). The native sample rate is kept.
pub fn load_waveform(path: &Path) -> Result<Waveform> {
    let err = |msg: String| Error::Audio {
        path: path.to_path_buf(),
        msg,
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let (interleaved, channels, rate) = match ext.as_str() {
        "flac" => read_flac(path).map_err(err)?,
        _ => read_wav(path).map_err(err)?,
    };
    if channels == 0 {
        return Err(err("zero channels".into()));
    }
    let mut mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| (frame.iter().map(|&v| v as f64).sum::<f64>() / channels as f64) as f32)
        .collect();
    let peak = mono.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-9);
    for v in &mut mono {
        *v /= peak;
    }
    Ok(Waveform::new(mono, rate))
}

/// [`load_waveform`] followed by linear resampling to `rate` when needed.
pub fn load_waveform_at(path: &Path, rate: u32) -> Result<Waveform> {
    let w = load_waveform(path)?;
    if w.sample_rate == rate {
        return Ok(w);
    }
    log::info!(
        "resampling {} from {} Hz to {} Hz",
        path.display(),
        w.sample_rate,
        rate
    );
    Ok(resample_linear(&w, rate))
}

pub fn resample_linear(w: &Waveform, rate: u32) -> Waveform {
    if w.sample_rate == rate || w.is_empty() {
        return Waveform::new(w.samples.clone(), rate);
    }
    let ratio = w.sample_rate as f64 / rate as f64;
    let out_len = ((w.len() as f64) / ratio).floor().max(1.0) as usize;
    let last = w.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = pos - i0 as f64;
            ((1.0 - frac) * w.samples[i0] as f64 + frac * w.samples[i1] as f64) as f32
        })
        .collect();
    Waveform::new(samples, rate)
}

/// Writes 16-bit mono PCM.
pub fn write_wav(w: &Waveform, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)?;
    Ok(())
}

type Decoded = (Vec<f32>, usize, u32);

fn read_wav(path: &Path) -> std::result::Result<Decoded, String> {
    let reader = hound::WavReader::open(path).map_err(|e| e.to_string())?;
    let spec = reader.spec();
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| e.to_string())?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| e.to_string())?
        }
    };
    Ok((samples, spec.channels as usize, spec.sample_rate))
}

fn read_flac(path: &Path) -> std::result::Result<Decoded, String> {
    let file = File::open(path).map_err(|e| e.to_string())?;
    let mut reader = claxon::FlacReader::new(BufReader::new(file)).map_err(|e| e.to_string())?;
    let info = reader.streaminfo();
    let scale = 1.0 / (1i64 << (info.bits_per_sample - 1)) as f32;
    let samples = reader
        .samples()
        .map(|s| s.map(|v| v as f32 * scale))
        .collect::<std::result::Result<Vec<f32>, _>>()
        .map_err(|e| e.to_string())?;
    Ok((samples, info.channels as usize, info.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| i as f32 / n as f32).collect(), 16_000)
    }

    #[test]
    fn exact_length_is_identity_in_every_mode() {
        let w = ramp(65_600);
        for mode in [LengthMode::PadRepeat, LengthMode::CropFixed, LengthMode::CropRandom] {
            assert_eq!(fix_length(&w, 65_600, mode, 3).unwrap(), w);
        }
    }

    #[test]
    fn short_input_is_tiled() {
        let w = ramp(100);
        let out = fix_length(&w, 250, LengthMode::PadRepeat, 0).unwrap();
        let tiled: Vec<f32> = [w.samples.clone(), w.samples.clone(), w.samples.clone()].concat();
        assert_eq!(out.samples, tiled[..250].to_vec());
    }

    #[test]
    fn random_crop_is_seed_determined() {
        let w = ramp(100_000);
        let a = fix_length(&w, 65_600, LengthMode::CropRandom, 42).unwrap();
        let b = fix_length(&w, 65_600, LengthMode::CropRandom, 42).unwrap();
        assert_eq!(a, b);
        let offset = (a.samples[0] * 100_000.0).round() as usize;
        assert_eq!(a.samples[..], w.samples[offset..offset + 65_600]);
        let c = fix_length(&w, 65_600, LengthMode::CropRandom, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(fix_length(&Waveform::new(vec![], 16_000), 10, LengthMode::PadRepeat, 0).is_err());
    }

    proptest! {
        #[test]
        fn fix_length_is_idempotent(n in 1usize..400, target in 1usize..400, crop in any::<bool>()) {
            let mode = if crop { LengthMode::CropFixed } else { LengthMode::PadRepeat };
            let once = fix_length(&ramp(n), target, mode, 0).unwrap();
            prop_assert_eq!(once.len(), target);
            let twice = fix_length(&once, target, mode, 0).unwrap();
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn one_second_file_round_trips_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.wav");
        let w = Waveform::new((0..16_000).map(|i| ((i as f32) * 0.01).sin()).collect(), 16_000);
        write_wav(&w, &p).unwrap();
        let back = load_waveform(&p).unwrap();
        assert_eq!((back.len(), back.sample_rate), (16_000, 16_000));
    }

    #[test]
    fn sine_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sine.wav");
        let orig: Vec<f32> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin() as f32)
            .collect();
        write_wav(&Waveform::new(orig.clone(), 16_000), &p).unwrap();
        let back = load_waveform(&p).unwrap();
        let err = orig
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-3, "max error {err}");
    }

    #[test]
    fn antiphase_stereo_cancels_to_silence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        for i in 0..1000 {
            let v = ((i % 200) as i16 - 100) * 100;
            wr.write_sample(v).unwrap();
            wr.write_sample(-v).unwrap();
        }
        wr.finalize().unwrap();
        let back = load_waveform(&p).unwrap();
        assert_eq!(back.len(), 1000);
        assert!(back.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corrupt_file_error_carries_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.wav");
        std::fs::write(&p, b"not audio at all").unwrap();
        let e = load_waveform(&p).unwrap_err();
        assert!(e.to_string().contains("bad.wav"), "{e}");
    }

    #[test]
    fn linear_resampler_halves_length() {
        let w = Waveform::new((0..32_000).map(|i| (i % 7) as f32).collect(), 32_000);
        let r = resample_linear(&w, 16_000);
        assert_eq!(r.len(), 16_000);
        assert_eq!(r.samples[1], w.samples[2]);
    }
}
