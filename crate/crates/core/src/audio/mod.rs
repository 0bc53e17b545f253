//! Corpus ingestion: protocol files, waveform loading and length fixing.

mod protocol;
mod toy;
mod wave;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use protocol::{
    manifest_from_dir, parse_protocol, parse_protocol_str, write_protocol, AudioLayout,
};
pub use toy::{synth_toy_corpus, TOY_PROTOCOL_FILE};
pub use wave::{fix_length, load_waveform, load_waveform_at, resample_linear, write_wav, LengthMode};

/// Sample rate every pipeline stage assumes.
pub const SAMPLE_RATE: u32 = 16_000;
/// Fixed utterance length fed to the spectrogram front-end.
pub const TARGET_LEN: usize = 65_600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }

    /// Class index used by the classifiers: bonafide = 0, spoof = 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::InvalidArgument(format!("unknown label token {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Dev,
    Eval,
    Pretrain,
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "dev" => Ok(Partition::Dev),
            "eval" => Ok(Partition::Eval),
            "pretrain" => Ok(Partition::Pretrain),
            other => Err(Error::InvalidArgument(format!("unknown partition {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    /// Attack tag, `-` for bona fide speech.
    pub system_id: String,
    pub label: Label,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub partition: Partition,
    pub records: Vec<UtteranceRecord>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Fails with the full list of records whose audio file is absent.
    pub fn verify_paths(&self) -> crate::Result<()> {
        let missing: Vec<PathBuf> = self
            .records
            .iter()
            .filter(|r| !r.path.is_file())
            .map(|r| r.path.clone())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingFiles(missing))
        }
    }
}

/// Mono audio with amplitude in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
