//! Run reports and sweep tables.
//!
//! Sweep output files:
//! - `sweep.csv`: one row per (triplet, preset), preset-major, with columns
//!   `triplet,preset,class_0..class_{K-1},avg,auc,best`. Absent classes leave
//!   an empty cell; `best` is 1 on the highest `avg` within each preset.
//! - `sweep.json`: array of `{triplet, preset, report}`.
//! - `roc/<preset>__<triplet>.csv`: columns `fpr,tpr`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigurationTriplet, ExperimentConfig};
use crate::error::{Error, Result};
use crate::metrics::RocPoint;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub reconstruction: f64,
    pub joint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Per class (or attribute); `None` when absent from the test split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub average_accuracy: f64,
    pub roc: Vec<RocPoint>,
    /// `None` when the test split holds a single class.
    pub auc: Option<f64>,
    /// Mean losses over the last epoch.
    pub final_losses: LossBreakdown,
    pub epoch_losses: Vec<LossBreakdown>,
    pub train_size: usize,
    pub test_size: usize,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// The report with timing removed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Reports for every (triplet, preset) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub triplets: Vec<ConfigurationTriplet>,
    pub presets: Vec<String>,
    cells: Vec<Option<RunReport>>,
}

impl SweepGrid {
    pub fn new(triplets: Vec<ConfigurationTriplet>, presets: Vec<String>) -> Self {
        let n = triplets.len() * presets.len();
        Self {
            triplets,
            presets,
            cells: vec![None; n],
        }
    }

    fn slot(&self, triplet: usize, preset: usize) -> usize {
        preset * self.triplets.len() + triplet
    }

    pub fn set(&mut self, triplet: usize, preset: usize, report: RunReport) {
        let i = self.slot(triplet, preset);
        self.cells[i] = Some(report);
    }

    pub fn get(&self, triplet: usize, preset: usize) -> Option<&RunReport> {
        self.cells[self.slot(triplet, preset)].as_ref()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub triplet: String,
    pub preset: String,
    pub per_class: Vec<Option<f64>>,
    pub average: f64,
    pub auc: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn from_grid(grid: &SweepGrid) -> Result<Self> {
        if !grid.is_complete() {
            let missing = grid.cells.iter().filter(|c| c.is_none()).count();
            return Err(Error::IncompleteGrid(format!("{missing} cell(s) missing")));
        }
        let mut rows = Vec::with_capacity(grid.cells.len());
        for (p, preset) in grid.presets.iter().enumerate() {
            let block_start = rows.len();
            for (t, triplet) in grid.triplets.iter().enumerate() {
                let r = grid.get(t, p).expect("grid complete");
                rows.push(SweepRow {
                    triplet: triplet.to_string(),
                    preset: preset.clone(),
                    per_class: r.per_class_accuracy.clone(),
                    average: r.average_accuracy,
                    auc: r.auc,
                    best: false,
                });
            }
            let block = &mut rows[block_start..];
            let best = block
                .iter()
                .enumerate()
                .fold(None::<(usize, f64)>, |acc, (i, row)| match acc {
                    Some((_, a)) if a >= row.average => acc,
                    _ => Some((i, row.average)),
                });
            if let Some((i, _)) = best {
                block[i].best = true;
            }
        }
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> String {
        let classes = self.rows.iter().map(|r| r.per_class.len()).max().unwrap_or(0);
        let mut out = String::from("triplet,preset");
        for c in 0..classes {
            let _ = write!(out, ",class_{c}");
        }
        out.push_str(",avg,auc,best\n");
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.triplet, r.preset);
            for c in 0..classes {
                let _ = write!(out, ",{}", num(r.per_class.get(c).copied().flatten()));
            }
            let _ = writeln!(out, ",{},{},{}", r.average, num(r.auc), u8::from(r.best));
        }
        out
    }
}

fn slug(triplet: &str) -> String {
    triplet.replace('/', "_").replace('+', "-")
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.fpr, p.tpr);
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the sweep table, full reports and per-cell ROC files into `dir`.
pub fn aggregate_sweep(grid: &SweepGrid, dir: &Path) -> Result<SweepTable> {
    let table = SweepTable::from_grid(grid)?;
    let roc_dir = dir.join("roc");
    std::fs::create_dir_all(&roc_dir).map_err(|e| Error::io(&roc_dir, e))?;
    write(&dir.join("sweep.csv"), &table.to_csv())?;

    #[derive(Serialize)]
    struct Cell<'a> {
        triplet: String,
        preset: &'a str,
        report: &'a RunReport,
    }
    let mut cells = Vec::new();
    for (p, preset) in grid.presets.iter().enumerate() {
        for (t, triplet) in grid.triplets.iter().enumerate() {
            let report = grid.get(t, p).expect("grid complete");
            let name = format!("{preset}__{}.csv", slug(&triplet.to_string()));
            write(&roc_dir.join(name), &roc_csv(&report.roc))?;
            cells.push(Cell {
                triplet: triplet.to_string(),
                preset,
                report,
            });
        }
    }
    write(
        &dir.join("sweep.json"),
        &serde_json::to_string_pretty(&cells).expect("reports serialize"),
    )?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn report(avg: f64) -> RunReport {
        RunReport {
            config: ExperimentConfig::desk_scale(),
            seed: 0,
            per_class_accuracy: vec![Some(avg), None],
            average_accuracy: avg,
            roc: vec![RocPoint { fpr: 0.0, tpr: 0.0 }, RocPoint { fpr: 1.0, tpr: 1.0 }],
            auc: Some(0.5),
            final_losses: LossBreakdown::default(),
            epoch_losses: vec![],
            train_size: 1,
            test_size: 1,
            wall_clock_secs: 1.0,
        }
    }

    #[test]
    fn best_flag_per_preset_block() {
        let triplets = ConfigurationTriplet::all();
        let presets: Vec<String> = ["toy-b", "toy-l"].map(String::from).to_vec();
        let mut grid = SweepGrid::new(triplets.clone(), presets);
        for t in 0..triplets.len() {
            grid.set(t, 0, report(0.5 + 0.01 * t as f64));
            grid.set(t, 1, report(if t == 1 { 0.9 } else { 0.6 }));
        }
        let table = SweepTable::from_grid(&grid).unwrap();
        assert_eq!(table.rows.len(), 10);
        let flagged: Vec<(usize, &str)> = table
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.best)
            .map(|(i, r)| (i, r.preset.as_str()))
            .collect();
        assert_eq!(flagged, vec![(4, "toy-b"), (6, "toy-l")]);
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.starts_with("triplet,preset,class_0,class_1,avg,auc,best\n"));
        assert!(csv.lines().nth(1).unwrap().ends_with(",0.5,,0.5,0.5,0"));
    }

    #[test]
    fn incomplete_grid_rejected() {
        let mut grid = SweepGrid::new(ConfigurationTriplet::all(), vec!["toy-b".into()]);
        grid.set(0, 0, report(0.5));
        assert!(matches!(SweepTable::from_grid(&grid), Err(Error::IncompleteGrid(_))));
    }

    #[test]
    fn files_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut grid = SweepGrid::new(ConfigurationTriplet::all(), vec!["toy-b".into()]);
        for t in 0..5 {
            grid.set(t, 0, report(0.5));
        }
        aggregate_sweep(&grid, dir.path()).unwrap();
        assert!(dir.path().join("sweep.csv").exists());
        assert!(dir.path().join("sweep.json").exists());
        let roc = std::fs::read_dir(dir.path().join("roc")).unwrap().count();
        assert_eq!(roc, 5);
        let text = std::fs::read_to_string(dir.path().join("roc/toy-b__M-LDP_R-RGB_C-RGB.csv")).unwrap();
        assert_eq!(text, "fpr,tpr\n0,0\n1,1\n");
    }
}
