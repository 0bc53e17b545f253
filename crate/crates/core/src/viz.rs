//! Image grids of (original | train-path | test-path) reconstructions.

use std::path::Path;

use ndarray::{s, Array3};

use crate::error::{Error, Result};
use crate::features::rgb_to_png;

const GAP: usize = 4;

/// Tiles `[3,H,W]` panels row by row with white gaps. All panels must share
/// one shape and every row must have the same number of panels.
pub fn panel_grid(rows: &[Vec<Array3<f64>>]) -> Result<Array3<f64>> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
    let (c, h, w) = first.dim();
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::ShapeMismatch("grid rows have different lengths".into()));
    }
    let height = rows.len() * h + (rows.len() - 1) * GAP;
    let width = cols * w + (cols - 1) * GAP;
    let mut out = Array3::from_elem((c, height, width), 1.0);
    for (i, row) in rows.iter().enumerate() {
        for (j, panel) in row.iter().enumerate() {
            if panel.dim() != (c, h, w) {
                return Err(Error::ShapeMismatch(format!("panel {:?} in a {c}x{h}x{w} grid", panel.shape())));
            }
            let (y, x) = (i * (h + GAP), j * (w + GAP));
            out.slice_mut(s![.., y..y + h, x..x + w]).assign(panel);
        }
    }
    Ok(out)
}

pub fn save_panel_grid(rows: &[Vec<Array3<f64>>], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    rgb_to_png(&panel_grid(rows)?, path)
}
