//! Metrics stream: one CSV row per evaluation point. CSV is the
//! canonical data artifact; the plot command renders it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: empty metrics file")]
    Empty { path: String },
    #[error("{path}:{row}: {message}")]
    Row {
        path: String,
        row: usize,
        message: String,
    },
}

/// Fixed leading columns; per-task evaluation columns follow, named
/// `eval_<task>`.
pub const BASE_COLUMNS: &[&str] = &[
    "iteration",
    "observed_steps",
    "env_steps",
    "mean_return",
    "loss",
    "loss_policy",
    "loss_value",
    "loss_eta",
    "loss_alpha",
    "eta",
    "alpha_mu",
    "alpha_sigma",
    "kl",
    "collect_success",
    "eval_mean_train",
    "eval_mean_test",
    "eval_mean_train_avg5",
];

pub struct MetricsWriter {
    out: BufWriter<File>,
    pub task_columns: Vec<String>,
}

impl MetricsWriter {
    pub fn create(path: &Path, task_names: &[String]) -> Result<MetricsWriter, MetricsError> {
        let file = File::create(path).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = MetricsWriter {
            out: BufWriter::new(file),
            task_columns: task_names.to_vec(),
        };
        let mut header: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(task_names.iter().map(|t| format!("eval_{t}")));
        w.raw_row(&header.join(","))?;
        Ok(w)
    }

    fn raw_row(&mut self, line: &str) -> Result<(), MetricsError> {
        writeln!(self.out, "{line}").map_err(|source| MetricsError::Io {
            path: "<metrics>".into(),
            source,
        })
    }

    pub fn write_row(&mut self, values: &[f64]) -> Result<(), MetricsError> {
        debug_assert_eq!(values.len(), BASE_COLUMNS.len() + self.task_columns.len());
        let line = values
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        self.raw_row(&line)
    }

    pub fn flush(&mut self) -> Result<(), MetricsError> {
        self.out.flush().map_err(|source| MetricsError::Io {
            path: "<metrics>".into(),
            source,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn series(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let p = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| MetricsError::Empty { path: p.clone() })?;
    let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(columns.len());
        for tok in line.split(',') {
            row.push(tok.trim().parse::<f64>().map_err(|_| MetricsError::Row {
                path: p.clone(),
                row: i + 1,
                message: format!("bad number {tok:?}"),
            })?);
        }
        if row.len() != columns.len() {
            return Err(MetricsError::Row {
                path: p.clone(),
                row: i + 1,
                message: format!("expected {} fields, found {}", columns.len(), row.len()),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(MetricsError::Empty { path: p });
    }
    Ok(MetricsTable { columns, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read() {
        let dir = std::env::temp_dir().join("instructrl_metrics_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let tasks = vec!["push".to_string(), "reach".to_string()];
        let mut w = MetricsWriter::create(&path, &tasks).unwrap();
        let n = BASE_COLUMNS.len() + 2;
        w.write_row(&(0..n).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        w.flush().unwrap();
        let t = read_metrics(&path).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.series("eval_push").unwrap(), vec![BASE_COLUMNS.len() as f64]);
    }

    #[test]
    fn empty_body_is_an_error() {
        let dir = std::env::temp_dir().join("instructrl_metrics_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.csv");
        std::fs::write(&path, "a,b\n").unwrap();
        assert!(matches!(
            read_metrics(&path),
            Err(MetricsError::Empty { .. })
        ));
    }

    #[test]
    fn malformed_row_reports_its_number() {
        let dir = std::env::temp_dir().join("instructrl_metrics_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n3,oops\n").unwrap();
        let err = read_metrics(&path).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }
}
