//! Experiment grid: one full train (and eval) run per cell, summarized as
//! a CSV and as a pivot table with one row per (classifier, fusion,
//! colours) and one column per (rec mode, init).

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use recolor_core::classifiers::{ClassifierKind, FusionMode};
use recolor_core::eval::format_eer_percent;
use recolor_core::training::{RecMode, RecolorInit, BEST_CHECKPOINT};

use crate::{cmd_eval, cmd_train, CliError, RunConfig};

pub const CSV_FILE: &str = "grid.csv";
pub const TABLE_FILE: &str = "grid.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Axes {
    pub colors: Vec<usize>,
    pub fusion: Vec<FusionMode>,
    pub classifier: Vec<ClassifierKind>,
    pub rec_mode: Vec<RecMode>,
    /// `scratch` or a `pretrained:` path template.
    pub init: Vec<String>,
    /// Overrides the per-classifier default width in every cell.
    pub classifier_width: Option<usize>,
}

fn axis<T: std::str::FromStr>(name: &str, flag: Option<String>, current: T) -> Result<Vec<T>, CliError> {
    let Some(list) = flag else { return Ok(vec![current]) };
    let items: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(CliError::Config(format!("grid axis {name} is empty")));
    }
    items
        .into_iter()
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::Config(format!("bad {name} value {s:?}")))
        })
        .collect()
}

/// `TFS` for training from scratch, `Pre` for a pretrained recolor model.
pub fn init_label(init: &str) -> &'static str {
    if init == "scratch" {
        "TFS"
    } else {
        "Pre"
    }
}

impl Axes {
    /// Unset axes take the single value from `cfg`. Flag order: colors,
    /// fusion, classifier, rec_mode, init.
    pub fn from_flags(cfg: &RunConfig, flags: [Option<String>; 5]) -> Result<Self, CliError> {
        let [colors, fusion, classifier, rec_mode, init] = flags;
        let init = axis("init", init, cfg.init.to_string())?;
        for i in &init {
            i.parse::<RecolorInit>()?;
        }
        if init.iter().filter(|i| init_label(i) == "Pre").count() > 1 {
            return Err(CliError::Config(
                "at most one pretrained init per grid; use {colors} in the path to vary it".into(),
            ));
        }
        Ok(Self {
            colors: axis("colors", colors, cfg.recolor.num_colors)?,
            fusion: axis("fusion", fusion, cfg.fusion)?,
            classifier: axis("classifier", classifier, cfg.classifier.kind)?,
            rec_mode: axis("rec_mode", rec_mode, cfg.loss.rec_mode)?,
            init,
            classifier_width: None,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.colors.len() * self.fusion.len() * self.classifier.len() * self.rec_mode.len() * self.init.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub classifier: ClassifierKind,
    pub fusion: FusionMode,
    pub colors: usize,
    pub rec_mode: RecMode,
    pub init: String,
    pub eer: f64,
    /// `eval` when an eval protocol is configured, else `dev`.
    pub split: &'static str,
    pub run_dir: PathBuf,
}

pub fn run_grid(cfg: &RunConfig, axes: &Axes) -> Result<String, CliError> {
    let mut cells = Vec::with_capacity(axes.num_cells());
    for &classifier in &axes.classifier {
        for &fusion in &axes.fusion {
            for &colors in &axes.colors {
                for &rec_mode in &axes.rec_mode {
                    for init in &axes.init {
                        let name = format!(
                            "{classifier}_{fusion}_k{colors}_{rec_mode}_{}",
                            init_label(init).to_lowercase()
                        );
                        let mut cell = cfg.clone();
                        // a new classifier kind starts from its default width
                        cell.set("classifier", &classifier.to_string())?;
                        if let Some(w) = axes.classifier_width {
                            cell.classifier.width = w;
                        }
                        cell.fusion = fusion;
                        cell.recolor.num_colors = colors;
                        cell.loss.rec_mode = rec_mode;
                        cell.set("init", &init.replace("{colors}", &colors.to_string()))?;
                        cell.out_dir = cfg.out_dir.join(&name);
                        log::info!("grid cell {name}");
                        let dev_eer = cmd_train(&cell)?;
                        let (eer, split) = if cell.eval.protocol.is_some() {
                            let eer = cmd_eval(
                                &cell,
                                &cell.out_dir.join(BEST_CHECKPOINT),
                                &cell.out_dir.join("scores.txt"),
                                None,
                            )?;
                            (eer, "eval")
                        } else {
                            (dev_eer, "dev")
                        };
                        cells.push(Cell {
                            classifier,
                            fusion,
                            colors,
                            rec_mode,
                            init: init.clone(),
                            eer,
                            split,
                            run_dir: cell.out_dir.clone(),
                        });
                    }
                }
            }
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_csv(&cells, &cfg.out_dir.join(CSV_FILE))?;
    let table = pivot(&cells, axes);
    fs::write(cfg.out_dir.join(TABLE_FILE), &table)?;
    Ok(table)
}

pub fn write_csv(cells: &[Cell], path: &std::path::Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["classifier", "fusion", "colors", "rec_mode", "init", "eer_percent", "split", "run_dir"])?;
    for c in cells {
        w.write_record([
            c.classifier.to_string(),
            c.fusion.to_string(),
            c.colors.to_string(),
            c.rec_mode.to_string(),
            init_label(&c.init).to_string(),
            format_eer_percent(c.eer),
            c.split.to_string(),
            c.run_dir.display().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned text table of EERs (percent).
pub fn pivot(cells: &[Cell], axes: &Axes) -> String {
    let mut columns: Vec<(RecMode, &'static str)> = Vec::new();
    for &m in &axes.rec_mode {
        for i in &axes.init {
            let c = (m, init_label(i));
            if !columns.contains(&c) {
                columns.push(c);
            }
        }
    }
    let mut header = vec!["classifier".to_string(), "fusion".into(), "colors".into()];
    header.extend(columns.iter().map(|(m, i)| format!("{m}/{i}")));
    let mut rows = vec![header];
    for &classifier in &axes.classifier {
        for &fusion in &axes.fusion {
            for &colors in &axes.colors {
                let mut row = vec![classifier.to_string(), fusion.to_string(), colors.to_string()];
                for &(m, label) in &columns {
                    let v = cells
                        .iter()
                        .find(|c| {
                            c.classifier == classifier
                                && c.fusion == fusion
                                && c.colors == colors
                                && c.rec_mode == m
                                && init_label(&c.init) == label
                        })
                        .map(|c| format_eer_percent(c.eer))
                        .unwrap_or_else(|| "-".into());
                    row.push(v);
                }
                rows.push(row);
            }
        }
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
        writeln!(out, "{}", line.join("  ")).expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(colors: &str, fusion: &str, init: Option<&str>) -> [Option<String>; 5] {
        [
            Some(colors.into()),
            Some(fusion.into()),
            Some("lcnn".into()),
            None,
            init.map(String::from),
        ]
    }

    #[test]
    fn axes_expand_and_validate() {
        let cfg = RunConfig::default();
        let a = Axes::from_flags(&cfg, flags("2,8", "only_rec,add,sub", None)).unwrap();
        assert_eq!(a.num_cells(), 6);
        assert_eq!(a.rec_mode, vec![cfg.loss.rec_mode]);
        assert!(Axes::from_flags(&cfg, flags("", "add", None)).is_err());
        assert!(Axes::from_flags(&cfg, flags("2", "mul", None)).is_err());
        assert!(Axes::from_flags(&cfg, flags("2", "add", Some("pretrained:a,pretrained:b"))).is_err());
    }

    #[test]
    fn pivot_has_one_row_per_model_and_init_columns() {
        let cfg = RunConfig::default();
        let a = Axes::from_flags(&cfg, flags("2,8", "only_rec,add,sub", Some("scratch,pretrained:p{colors}"))).unwrap();
        let mut cells = Vec::new();
        for &fusion in &a.fusion {
            for &colors in &a.colors {
                for init in &a.init {
                    cells.push(Cell {
                        classifier: ClassifierKind::Lcnn,
                        fusion,
                        colors,
                        rec_mode: RecMode::TrueRec,
                        init: init.clone(),
                        eer: 0.1173,
                        split: "dev",
                        run_dir: PathBuf::new(),
                    });
                }
            }
        }
        let t = pivot(&cells, &a);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[0].contains("true_rec/TFS") && lines[0].contains("true_rec/Pre"));
        assert!(lines[1..].iter().all(|l| l.matches("11.73").count() == 2));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        write_csv(&cells, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 13);
    }
}
