use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{delta_mp, mean, sem, EvalError};
use crate::util::write_atomic;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PLOT_CSV: &str = "plot.csv";

/// Statistics for one (checkpoint, dataset) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub checkpoint_step: u64,
    pub dataset: String,
    /// Dev macro-F1 per repeat, in repeat order.
    pub f1s: Vec<f64>,
    pub mean_f1: f64,
    pub sem: f64,
    /// Relative to the same dataset's step-0 mean, in percent. `None` when
    /// the baseline is already perfect (no headroom); the baseline row
    /// itself is always 0.
    pub delta_mp_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub base_seed: u64,
    pub repeats: usize,
    pub checkpoint_steps: Vec<u64>,
    pub datasets: Vec<String>,
    /// Ordered by dataset (as given), then checkpoint step.
    pub cells: Vec<ReportCell>,
}

/// One data row of the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub checkpoint_step: u64,
    pub dataset: String,
    pub repeat_count: usize,
    pub mean_f1: f64,
    pub sem: f64,
    pub delta_mp_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub plot: PathBuf,
}

impl EvalReport {
    /// Builds the report from per-cell `(repeat, f1)` lists. Every
    /// (step, dataset) pair needs exactly `repeats` distinct repeats.
    pub fn aggregate(
        steps: &[u64],
        datasets: &[String],
        repeats: usize,
        base_seed: u64,
        grid: &BTreeMap<(u64, String), Vec<(usize, f64)>>,
    ) -> Result<Self, EvalError> {
        if !steps.contains(&0) {
            return Err(EvalError::MissingBaseline);
        }
        let mut cells = Vec::new();
        for ds in datasets {
            let mut rows = Vec::new();
            for &step in steps {
                let mut runs = grid.get(&(step, ds.clone())).cloned().unwrap_or_default();
                runs.sort_by_key(|r| r.0);
                runs.dedup_by_key(|r| r.0);
                if runs.len() != repeats || runs.iter().enumerate().any(|(i, r)| r.0 != i) {
                    return Err(EvalError::Report(format!(
                        "step {step}, dataset {ds}: expected repeats 0..{repeats}, have {:?}",
                        runs.iter().map(|r| r.0).collect::<Vec<_>>()
                    )));
                }
                let f1s: Vec<f64> = runs.iter().map(|r| r.1).collect();
                rows.push((step, mean(&f1s), sem(&f1s)?, f1s));
            }
            let base = rows
                .iter()
                .find(|r| r.0 == 0)
                .map(|r| r.1)
                .expect("step 0 present");
            for (step, m, s, f1s) in rows {
                cells.push(ReportCell {
                    checkpoint_step: step,
                    dataset: ds.clone(),
                    f1s,
                    mean_f1: m,
                    sem: s,
                    delta_mp_pct: if step == 0 {
                        Some(0.0)
                    } else {
                        delta_mp(base, m).ok()
                    },
                });
            }
        }
        Ok(EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            base_seed,
            repeats,
            checkpoint_steps: steps.to_vec(),
            datasets: datasets.to_vec(),
            cells,
        })
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.cells
            .iter()
            .map(|c| CsvRow {
                checkpoint_step: c.checkpoint_step,
                dataset: c.dataset.clone(),
                repeat_count: c.f1s.len(),
                mean_f1: c.mean_f1,
                sem: c.sem,
                delta_mp_pct: c.delta_mp_pct,
            })
            .collect()
    }

    pub fn cell(&self, step: u64, dataset: &str) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.checkpoint_step == step && c.dataset == dataset)
    }
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| EvalError::Report(e.to_string()))?;
    }
    w.into_inner().map_err(|e| EvalError::Report(e.to_string()))
}

#[derive(Serialize)]
struct PlotRow<'a> {
    dataset: &'a str,
    checkpoint_step: u64,
    mean_f1: f64,
    sem: f64,
    delta_mp_pct: Option<f64>,
}

/// Writes `report.json`, `report.csv` and `plot.csv` (F1 and ΔMP against
/// pretraining step, one series per dataset) into `dir`, each via a
/// temporary file and rename.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<ReportFiles, EvalError> {
    fs::create_dir_all(dir)?;
    let files = ReportFiles {
        json: dir.join(REPORT_JSON),
        csv: dir.join(REPORT_CSV),
        plot: dir.join(PLOT_CSV),
    };
    let mut json =
        serde_json::to_vec_pretty(report).map_err(|e| EvalError::Report(e.to_string()))?;
    json.push(b'\n');
    write_atomic(&files.json, &json)?;
    write_atomic(&files.csv, &csv_bytes(&report.csv_rows())?)?;
    let plot: Vec<PlotRow> = report
        .cells
        .iter()
        .map(|c| PlotRow {
            dataset: &c.dataset,
            checkpoint_step: c.checkpoint_step,
            mean_f1: c.mean_f1,
            sem: c.sem,
            delta_mp_pct: c.delta_mp_pct,
        })
        .collect();
    write_atomic(&files.plot, &csv_bytes(&plot)?)?;
    Ok(files)
}

pub fn read_report_json(path: &Path) -> Result<EvalReport, EvalError> {
    let report: EvalReport = serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| EvalError::Report(format!("{}: {e}", path.display())))?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(EvalError::Report(format!(
            "schema version {} (expected {REPORT_SCHEMA_VERSION})",
            report.schema_version
        )));
    }
    Ok(report)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<CsvRow>, EvalError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| EvalError::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    rdr.deserialize()
        .collect::<Result<Vec<CsvRow>, _>>()
        .map_err(|e| EvalError::Csv {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: &[(u64, &str, &[f64])]) -> BTreeMap<(u64, String), Vec<(usize, f64)>> {
        values
            .iter()
            .map(|(s, d, f)| ((*s, d.to_string()), f.iter().copied().enumerate().collect()))
            .collect()
    }

    fn sample() -> EvalReport {
        let g = grid(&[
            (0, "a", &[0.5, 0.6, 0.55]),
            (100, "a", &[0.7, 0.71, 0.69]),
            (0, "b", &[0.9, 0.91, 0.905]),
            (100, "b", &[0.1 + 0.2, 0.3, 1.0 / 3.0]),
        ]);
        EvalReport::aggregate(&[0, 100], &["a".into(), "b".into()], 3, 7, &g).unwrap()
    }

    #[test]
    fn aggregates() {
        let r = sample();
        assert_eq!(r.cells.len(), 4);
        assert_eq!(r.cell(0, "a").unwrap().delta_mp_pct, Some(0.0));
        let c = r.cell(100, "a").unwrap();
        let base = 0.55;
        assert!((c.delta_mp_pct.unwrap() - 100.0 * (0.7 - base) / (1.0 - base)).abs() < 1e-9);
        assert!(r.cell(100, "b").unwrap().delta_mp_pct.unwrap() < 0.0);
    }

    #[test]
    fn perfect_baseline_has_no_delta() {
        let g = grid(&[(0, "a", &[1.0, 1.0]), (5, "a", &[0.9, 1.0])]);
        let r = EvalReport::aggregate(&[0, 5], &["a".into()], 2, 0, &g).unwrap();
        assert_eq!(r.cell(0, "a").unwrap().delta_mp_pct, Some(0.0));
        assert_eq!(r.cell(5, "a").unwrap().delta_mp_pct, None);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&r, dir.path()).unwrap();
        assert_eq!(read_report_csv(&files.csv).unwrap(), r.csv_rows());
        assert_eq!(read_report_json(&files.json).unwrap(), r);
    }

    #[test]
    fn missing_repeat_or_baseline() {
        let g = grid(&[(0, "a", &[0.5, 0.6]), (1, "a", &[0.5])]);
        assert!(EvalReport::aggregate(&[0, 1], &["a".into()], 2, 0, &g).is_err());
        assert!(matches!(
            EvalReport::aggregate(&[1], &["a".into()], 1, 0, &g),
            Err(EvalError::MissingBaseline)
        ));
    }

    #[test]
    fn files_reparse_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        let files = emit_report(&r, dir.path()).unwrap();
        assert_eq!(read_report_json(&files.json).unwrap(), r);
        assert_eq!(read_report_csv(&files.csv).unwrap(), r.csv_rows());
        let header = fs::read_to_string(&files.csv).unwrap();
        assert!(
            header.starts_with("checkpoint_step,dataset,repeat_count,mean_f1,sem,delta_mp_pct\n")
        );
        assert_eq!(header.lines().count(), 5);
    }
}
