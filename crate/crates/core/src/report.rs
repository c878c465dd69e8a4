//! Metrics tables and the files written from them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const RADAR_CSV: &str = "radar.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

const METRICS: [&str; 3] = ["success", "task_retention", "env_retention"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed report {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("report {0} has no rows")]
    Empty(PathBuf),
    #[error("nothing to report")]
    NoTables,
    #[error("value out of range in {path}: {value}")]
    OutOfRange { path: PathBuf, value: f64 },
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub model: String,
    pub mode: String,
    pub memory: bool,
    pub success: f64,
    pub task_retention: f64,
    pub env_retention: f64,
}

impl MetricsRow {
    fn metric(&self, name: &str) -> f64 {
        match name {
            "success" => self.success,
            "task_retention" => self.task_retention,
            _ => self.env_retention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub valid_trials: usize,
    pub invalid_trials: usize,
}

fn memory_word(memory: bool) -> &'static str {
    if memory {
        "on"
    } else {
        "off"
    }
}

impl MetricsTable {
    pub fn row(&self, task: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.task == task)
    }

    /// `mode/memory-on|off/model`, taken from the first row.
    pub fn label(&self) -> String {
        match self.rows.first() {
            Some(r) => format!("{}/memory-{}/{}", r.mode, memory_word(r.memory), r.model),
            None => "empty".to_string(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,model,mode,memory,success,task_retention,env_retention\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4},{:.4},{:.4}",
                r.task,
                r.model,
                r.mode,
                memory_word(r.memory),
                r.success,
                r.task_retention,
                r.env_retention
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.label());
        let _ = writeln!(
            out,
            "valid trials: {}  invalid trials: {}",
            self.valid_trials, self.invalid_trials
        );
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>15} {:>14}",
            "task", "success", "task retention", "env retention"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>8.2} {:>15.2} {:>14.2}",
                r.task, r.success, r.task_retention, r.env_retention
            );
        }
        out
    }

    /// One series per metric with one column per task, for radar plots.
    pub fn radar_csv(&self) -> String {
        let mut out = String::from("metric");
        for r in &self.rows {
            out.push(',');
            out.push_str(&r.task);
        }
        out.push('\n');
        for metric in METRICS {
            out.push_str(metric);
            for r in &self.rows {
                let _ = write!(out, ",{:.4}", r.metric(metric));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `report.csv`, `report.txt` and `radar.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), ReportError> {
        if self.rows.is_empty() {
            return Err(ReportError::NoTables);
        }
        write_file(&dir.join(REPORT_CSV), &self.to_csv())?;
        write_file(&dir.join(REPORT_TXT), &self.to_text())?;
        write_file(&dir.join(RADAR_CSV), &self.radar_csv())
    }

    /// Reads a `report.csv`, from a file or a run directory holding one.
    pub fn read(path: &Path) -> Result<Self, ReportError> {
        let path = if path.is_dir() {
            path.join(REPORT_CSV)
        } else {
            path.to_path_buf()
        };
        let csv_err = |source| ReportError::Csv {
            path: path.clone(),
            source,
        };
        let text = std::fs::read_to_string(&path).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            let memory = record.get(3).unwrap_or_default() == "on";
            let mut row: MetricsRow = record
                .deserialize(Some(&csv::StringRecord::from(vec![
                    "task",
                    "model",
                    "mode",
                    "memory_text",
                    "success",
                    "task_retention",
                    "env_retention",
                ])))
                .map(|raw: RawRow| raw.into_row())
                .map_err(csv_err)?;
            row.memory = memory;
            for value in [row.success, row.task_retention, row.env_retention] {
                if !(0.0..=1.0).contains(&value) {
                    return Err(ReportError::OutOfRange { path, value });
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(ReportError::Empty(path));
        }
        Ok(Self {
            rows,
            valid_trials: 0,
            invalid_trials: 0,
        })
    }
}

#[derive(Deserialize)]
struct RawRow {
    task: String,
    model: String,
    mode: String,
    success: f64,
    task_retention: f64,
    env_retention: f64,
}

impl RawRow {
    fn into_row(self) -> MetricsRow {
        MetricsRow {
            task: self.task,
            model: self.model,
            mode: self.mode,
            memory: false,
            success: self.success,
            task_retention: self.task_retention,
            env_retention: self.env_retention,
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), ReportError> {
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Joins tables on the task column: one `<label>:<metric>` column per run.
pub fn comparison_csv(tables: &[MetricsTable]) -> Result<String, ReportError> {
    if tables.is_empty() {
        return Err(ReportError::NoTables);
    }
    let mut tasks: Vec<&str> = Vec::new();
    for table in tables {
        for row in &table.rows {
            if !tasks.contains(&row.task.as_str()) {
                tasks.push(&row.task);
            }
        }
    }
    let mut out = String::from("task");
    for table in tables {
        let label = table.label();
        for metric in METRICS {
            let _ = write!(out, ",{label}:{metric}");
        }
    }
    out.push('\n');
    for task in tasks {
        out.push_str(task);
        for table in tables {
            for metric in METRICS {
                match table.row(task) {
                    Some(row) => {
                        let _ = write!(out, ",{:.4}", row.metric(metric));
                    }
                    None => out.push(','),
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn summary_text(tables: &[MetricsTable]) -> String {
    tables
        .iter()
        .map(MetricsTable::to_text)
        .collect::<Vec<_>>()
        .join("\n")
}

/// Writes `comparison.csv` and `summary.txt` into `dir`.
pub fn write_comparison(tables: &[MetricsTable], dir: &Path) -> Result<(), ReportError> {
    let csv = comparison_csv(tables)?;
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(&dir.join(COMPARISON_CSV), &csv)?;
    write_file(&dir.join(SUMMARY_TXT), &summary_text(tables))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(memory: bool, success: f64) -> MetricsTable {
        MetricsTable {
            rows: ["separate", "tower"]
                .iter()
                .map(|task| MetricsRow {
                    task: task.to_string(),
                    model: "mock-oracle".into(),
                    mode: "intervened".into(),
                    memory,
                    success,
                    task_retention: 1.0,
                    env_retention: 0.5,
                })
                .collect(),
            valid_trials: 50,
            invalid_trials: 0,
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let csv = table(true, 0.98).to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("task,model,mode,memory,success,task_retention,env_retention")
        );
        assert_eq!(
            lines.next(),
            Some("separate,mock-oracle,intervened,on,0.9800,1.0000,0.5000")
        );
    }

    #[test]
    fn csv_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let original = table(false, 0.25);
        original.write_to(dir.path()).unwrap();
        let read = MetricsTable::read(dir.path()).unwrap();
        assert_eq!(read.rows, original.rows);
    }

    #[test]
    fn comparison_joins_on_task() {
        let csv = comparison_csv(&[table(true, 1.0), table(false, 0.5)]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("task,intervened/memory-on/mock-oracle:success"));
        assert!(lines[0].contains("intervened/memory-off/mock-oracle:env_retention"));
        assert_eq!(lines[1], "separate,1.0000,1.0000,0.5000,0.5000,1.0000,0.5000");
        assert!(comparison_csv(&[]).is_err());
    }

    #[test]
    fn empty_or_corrupt_reports_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(MetricsTable::read(dir.path()).is_err());
        std::fs::write(
            dir.path().join(REPORT_CSV),
            "task,model,mode,memory,success,task_retention,env_retention\n",
        )
        .unwrap();
        assert!(matches!(MetricsTable::read(dir.path()), Err(ReportError::Empty(_))));
        std::fs::write(
            dir.path().join(REPORT_CSV),
            "task,model,mode,memory,success,task_retention,env_retention\nseparate,m,x,on,abc,1,1\n",
        )
        .unwrap();
        assert!(MetricsTable::read(dir.path()).is_err());
        assert!(MetricsTable::default().write_to(dir.path()).is_err());
    }
}
