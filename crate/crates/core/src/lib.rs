pub mod audio;
pub mod checkpoint;
pub mod classifiers;
pub mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod recolor;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
