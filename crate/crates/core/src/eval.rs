//! Detection scores and the equal error rate.
//!
//! Scores follow the "higher is more bona fide" convention. At threshold
//! `t`, FAR is the fraction of spoof scores `>= t` and FRR the fraction of
//! bona fide scores `< t`. Thresholds are the sorted distinct scores plus
//! `+inf` (where FAR = 0 and FRR = 1). The EER is read off where the two
//! curves cross, interpolating linearly between adjacent thresholds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::audio::Label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEntry {
    pub utt_id: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, utt_id: impl Into<String>, label: Label, score: f64) {
        self.entries.push(ScoreEntry {
            utt_id: utt_id.into(),
            label,
            score,
        });
    }

    fn split(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut bona = Vec::new();
        let mut spoof = Vec::new();
        for e in &self.entries {
            if !e.score.is_finite() {
                return Err(Error::InvalidArgument(format!("score of {} is not finite", e.utt_id)));
            }
            match e.label {
                Label::Bonafide => bona.push(e.score),
                Label::Spoof => spoof.push(e.score),
            }
        }
        if bona.is_empty() || spoof.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "EER needs both classes, got {} bona fide and {} spoof scores",
                bona.len(),
                spoof.len()
            )));
        }
        Ok((bona, spoof))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub n_bona: usize,
    pub n_spoof: usize,
}

/// `(threshold, FAR, FRR)` at every distinct score and at `+inf`.
fn sweep(bona: &mut [f64], spoof: &mut [f64]) -> Vec<(f64, f64, f64)> {
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = bona.iter().chain(spoof.iter()).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    let (mut ib, mut is) = (0usize, 0usize);
    thresholds
        .into_iter()
        .map(|t| {
            // ib = #bona < t, is = #spoof < t
            while ib < bona.len() && bona[ib] < t {
                ib += 1;
            }
            while is < spoof.len() && spoof[is] < t {
                is += 1;
            }
            (t, (spoof.len() - is) as f64 / ns, ib as f64 / nb)
        })
        .collect()
}

pub fn compute_eer(s: &ScoreSet) -> Result<EerResult> {
    let (mut bona, mut spoof) = s.split()?;
    let (n_bona, n_spoof) = (bona.len(), spoof.len());
    let pts = sweep(&mut bona, &mut spoof);
    let (eer, threshold) = crossing(&pts);
    Ok(EerResult {
        eer,
        threshold,
        n_bona,
        n_spoof,
    })
}

/// Crossing of FAR (non-increasing) and FRR (non-decreasing) along the
/// threshold grid. The first grid point always has FRR = 0 < FAR and the
/// sentinel has FRR = 1 > FAR = 0.
fn crossing(pts: &[(f64, f64, f64)]) -> (f64, f64) {
    let i = pts
        .iter()
        .position(|&(_, far, frr)| frr >= far)
        .expect("sentinel guarantees a crossing");
    let (t1, far1, frr1) = pts[i];
    if frr1 == far1 || i == 0 {
        return ((far1 + frr1) / 2.0, t1);
    }
    let (t0, far0, frr0) = pts[i - 1];
    let (d0, d1) = (frr0 - far0, frr1 - far1);
    let a = -d0 / (d1 - d0);
    let eer = far0 + a * (far1 - far0);
    let threshold = if t1.is_finite() { t0 + a * (t1 - t0) } else { t0 };
    (eer, threshold)
}

/// `(FAR, FRR)` operating points in rising-threshold order.
pub fn det_points(s: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    let (mut bona, mut spoof) = s.split()?;
    Ok(sweep(&mut bona, &mut spoof)
        .into_iter()
        .map(|(_, far, frr)| (far, frr))
        .collect())
}

pub fn write_det_csv(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("far,frr\n");
    for (far, frr) in points {
        writeln!(out, "{far},{frr}").expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Formats an EER as a percentage with two decimals, e.g. `11.73`.
pub fn format_eer_percent(eer: f64) -> String {
    format!("{:.2}", eer * 100.0)
}

pub fn scores_to_string(s: &ScoreSet) -> String {
    let mut out = String::new();
    for e in &s.entries {
        // `{}` on f64 is the shortest representation that reads back exactly
        writeln!(out, "{} {} {}", e.utt_id, e.label, e.score).expect("string write");
    }
    out
}

pub fn write_scores(s: &ScoreSet, path: &Path) -> Result<()> {
    fs::write(path, scores_to_string(s))?;
    Ok(())
}

pub fn parse_scores(text: &str, source: &Path) -> Result<ScoreSet> {
    let mut set = ScoreSet::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::ScoreFile {
            path: source.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let label: Label = fields[1].parse().map_err(|_| err(format!("unknown label {:?}", fields[1])))?;
        let score: f64 = fields[2].parse().map_err(|_| err(format!("bad score {:?}", fields[2])))?;
        set.push(fields[0], label, score);
    }
    Ok(set)
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    parse_scores(&fs::read_to_string(path)?, path)
}
