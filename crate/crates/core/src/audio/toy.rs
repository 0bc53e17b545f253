//! Synthetic two-class corpus for desk-scale runs.
//!
//! Bona fide utterances are harmonic tone stacks (random f0, slow vibrato
//! and amplitude envelope) below 4 kHz over a faint noise floor. Spoof
//! utterances reuse the same generator but drop the harmonics inside a
//! random 800 Hz notch and add a 5–7 kHz noise burst lasting 1–2 s.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::protocol::{write_protocol, AudioLayout};
use super::wave::write_wav;
use super::{CorpusManifest, Label, Partition, UtteranceRecord, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const TOY_PROTOCOL_FILE: &str = "protocol.txt";
const TOY_AUDIO_DIR: &str = "wav";

const HARMONIC_CEILING: f64 = 4000.0;
const BURST_BAND: (f64, f64) = (5000.0, 7000.0);
const NOTCH_WIDTH: f64 = 800.0;

/// Writes `n_per_class` bona fide and `n_per_class` spoof utterances as
/// 16-bit 16 kHz WAV under `out_dir/wav/`, plus `out_dir/protocol.txt`.
pub fn synth_toy_corpus(n_per_class: usize, seed: u64, out_dir: &Path) -> Result<CorpusManifest> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    let layout = AudioLayout::new(out_dir.join(TOY_AUDIO_DIR), "wav");
    fs::create_dir_all(&layout.dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        // alternate classes so any prefix of the corpus is balanced
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Spoof };
        let utt_id = format!("TOY_{seed}_{i:05}");
        let wave = synth_utterance(&mut rng, label);
        let path = layout.path_for(&utt_id);
        write_wav(&wave, &path)?;
        records.push(UtteranceRecord {
            speaker_id: format!("TOYSPK_{:03}", i / 2 % 10),
            system_id: match label {
                Label::Bonafide => "-".into(),
                Label::Spoof => "T01".into(),
            },
            utt_id,
            label,
            path,
        });
    }
    write_protocol(&records, &out_dir.join(TOY_PROTOCOL_FILE))?;
    Ok(CorpusManifest {
        partition: Partition::Train,
        records,
    })
}

fn synth_utterance(rng: &mut ChaCha8Rng, label: Label) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let len = rng.gen_range(48_000..80_000usize);
    let f0: f64 = rng.gen_range(90.0..220.0);
    let vib_rate: f64 = rng.gen_range(0.2..0.6);
    let vib_phase: f64 = rng.gen_range(0.0..TAU);
    let env_rate: f64 = rng.gen_range(0.5..2.0);
    let env_phase: f64 = rng.gen_range(0.0..TAU);
    let notch_lo: f64 = rng.gen_range(2000.0..3200.0);
    let burst_len = rng.gen_range(16_000..32_000usize).min(len);
    let burst_start = rng.gen_range(0..=len - burst_len);
    let spoof = label == Label::Spoof;

    let n_harm = (HARMONIC_CEILING / f0).floor() as usize;
    let harmonics: Vec<(usize, f64, f64)> = (1..=n_harm)
        .map(|h| (h, 1.0 / (h as f64).powf(0.7), rng.gen_range(0.0..TAU)))
        .filter(|&(h, _, _)| {
            let f = h as f64 * f0;
            !(spoof && f >= notch_lo && f < notch_lo + NOTCH_WIDTH)
        })
        .collect();
    let burst: Vec<(f64, f64)> = (0..60)
        .map(|_| (rng.gen_range(BURST_BAND.0..BURST_BAND.1), rng.gen_range(0.0..TAU)))
        .collect();

    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / sr;
        let inst_f0 = f0 * (1.0 + 0.03 * (TAU * vib_rate * t + vib_phase).sin());
        phase += TAU * inst_f0 / sr;
        let env = 0.55 + 0.45 * (TAU * env_rate * t + env_phase).sin();
        let mut v = 0.0;
        for &(h, amp, ph) in &harmonics {
            v += amp * (h as f64 * phase + ph).sin();
        }
        v *= env;
        if spoof && n >= burst_start && n < burst_start + burst_len {
            let k = n - burst_start;
            let fade = 320.0;
            let ramp = (k as f64 / fade).min((burst_len - k) as f64 / fade).min(1.0);
            let mut b = 0.0;
            for &(f, ph) in &burst {
                b += (TAU * f * t + ph).sin();
            }
            v += 0.12 * ramp * b;
        }
        v += 0.004 * rng.gen_range(-1.0..1.0);
        samples.push(v);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    Waveform::new(
        samples.into_iter().map(|v| (0.9 * v / peak) as f32).collect(),
        SAMPLE_RATE,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{parse_protocol, AudioLayout};

    #[test]
    fn zero_per_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_toy_corpus(0, 1, dir.path()).is_err());
    }

    #[test]
    fn counts_and_protocol_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_toy_corpus(5, 11, dir.path()).unwrap();
        assert_eq!((m.count(Label::Bonafide), m.count(Label::Spoof)), (5, 5));
        let wavs = fs::read_dir(dir.path().join("wav")).unwrap().count();
        assert_eq!(wavs, 10);
        let parsed = parse_protocol(
            &dir.path().join(TOY_PROTOCOL_FILE),
            Partition::Train,
            &AudioLayout::new(dir.path().join("wav"), "wav"),
        )
        .unwrap();
        assert_eq!(parsed.records, m.records);
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = synth_toy_corpus(2, 5, a.path()).unwrap();
        synth_toy_corpus(2, 5, b.path()).unwrap();
        for r in &ma.records {
            let name = r.path.file_name().unwrap();
            let x = fs::read(a.path().join("wav").join(name)).unwrap();
            let y = fs::read(b.path().join("wav").join(name)).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn unwritable_output_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        assert!(synth_toy_corpus(1, 0, &file.join("sub")).is_err());
    }
}
