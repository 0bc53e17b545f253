use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Protocol { path: PathBuf, line: usize, msg: String },
    #[error("missing audio files ({} total): {}", .0.len(), list_paths(.0))]
    MissingFiles(Vec<PathBuf>),
    #[error("cannot read audio {path}: {msg}")]
    Audio { path: PathBuf, msg: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("score file {path}: line {line}: {msg}")]
    ScoreFile { path: PathBuf, line: usize, msg: String },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

fn list_paths(paths: &[PathBuf]) -> String {
    const SHOWN: usize = 20;
    let mut s: Vec<String> = paths.iter().take(SHOWN).map(|p| p.display().to_string()).collect();
    if paths.len() > SHOWN {
        s.push(format!("... and {} more", paths.len() - SHOWN));
    }
    s.join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;
