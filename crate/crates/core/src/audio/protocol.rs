//! ASVspoof-style five-column protocol files:
//! `speaker utt_id unused system_id key`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::{CorpusManifest, Label, Partition, UtteranceRecord};
use crate::error::{Error, Result};

/// Where the audio for a protocol lives: `<dir>/<utt_id>.<extension>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AudioLayout {
    pub dir: PathBuf,
    pub extension: String,
}

impl AudioLayout {
    pub fn new(dir: impl Into<PathBuf>, extension: &str) -> Self {
        Self {
            dir: dir.into(),
            extension: extension.trim_start_matches('.').to_string(),
        }
    }

    pub fn path_for(&self, utt_id: &str) -> PathBuf {
        self.dir.join(format!("{utt_id}.{}", self.extension))
    }
}

/// Parses protocol text without touching the filesystem.
pub fn parse_protocol_str(
    text: &str,
    source: &Path,
    partition: Partition,
    audio: &AudioLayout,
) -> Result<CorpusManifest> {
    let err = |line: usize, msg: String| Error::Protocol {
        path: source.to_path_buf(),
        line,
        msg,
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(line_no, format!("expected 5 fields, found {}", fields.len())));
        }
        let label: Label = fields[4]
            .parse()
            .map_err(|_| err(line_no, format!("unknown key {:?}", fields[4])))?;
        let system_id = fields[3];
        if (label == Label::Bonafide) != (system_id == "-") {
            return Err(err(
                line_no,
                format!("system id {system_id:?} inconsistent with key {label}"),
            ));
        }
        let utt_id = fields[1];
        if !seen.insert(utt_id.to_string()) {
            return Err(err(line_no, format!("duplicate utterance id {utt_id}")));
        }
        records.push(UtteranceRecord {
            utt_id: utt_id.to_string(),
            speaker_id: fields[0].to_string(),
            system_id: system_id.to_string(),
            label,
            path: audio.path_for(utt_id),
        });
    }
    Ok(CorpusManifest { partition, records })
}

/// Reads a protocol file and checks that every referenced audio file exists.
pub fn parse_protocol(path: &Path, partition: Partition, audio: &AudioLayout) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path)?;
    let manifest = parse_protocol_str(&text, path, partition, audio)?;
    manifest.verify_paths()?;
    Ok(manifest)
}

pub fn write_protocol(records: &[UtteranceRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        writeln!(out, "{} {} - {} {}", r.speaker_id, r.utt_id, r.system_id, r.label)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Builds a bona fide manifest from every `.wav`/`.flac` under `dir`
/// (e.g. a clean-speech corpus used for reconstruction pretraining).
/// The speaker id is the name of the containing directory.
pub fn manifest_from_dir(dir: &Path, partition: Partition) -> Result<CorpusManifest> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("wav") | Some("flac")
            )
        })
        .collect();
    paths.sort();
    let records = paths
        .into_iter()
        .map(|p| UtteranceRecord {
            utt_id: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
            speaker_id: p
                .parent()
                .and_then(|d| d.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "-".into()),
            system_id: "-".into(),
            label: Label::Bonafide,
            path: p,
        })
        .collect();
    Ok(CorpusManifest { partition, records })
}
