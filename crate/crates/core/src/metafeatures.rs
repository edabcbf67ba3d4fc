//! Dataset meta-features fed to the network next to the pipeline tokens.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{splitmix64, unit_fraction};
use crate::task::{TaskKind, TaskSpec};

pub const META_DIM: usize = 8;

/// Slot names in vector order; stored in checkpoints.
pub const META_SLOTS: [&str; META_DIM] = [
    "log1p_rows",
    "log1p_columns",
    "fraction_missing",
    "fraction_categorical",
    "n_classes",
    "class_entropy",
    "rows_per_column",
    "bias",
];

const RATIO_CAP: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatures(pub [f64; META_DIM]);

impl MetaFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Stand-in vector for a surrogate dataset: slot `i < 7` is
    /// `(splitmix64(seed ^ (0x6d657461 + i)) mod 10^6) / 10^6`, the last slot is 1.
    pub fn surrogate(seed: u64) -> Self {
        let mut v = [1.0; META_DIM];
        for (i, slot) in v.iter_mut().take(META_DIM - 1).enumerate() {
            *slot = unit_fraction(splitmix64(seed ^ (0x6d65_7461 + i as u64)));
        }
        MetaFeatures(v)
    }
}

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("target column `{0}` not found")]
    MissingTarget(String),
    #[error("table has no rows")]
    NoRows,
    #[error("failed to read {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

/// Column-major table of raw string cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<String>>,
}

impl Table {
    pub fn from_rows(headers: Vec<String>, rows: &[Vec<String>]) -> Self {
        let mut columns = vec![Vec::with_capacity(rows.len()); headers.len()];
        for row in rows {
            for (c, col) in columns.iter_mut().enumerate() {
                col.push(row.get(c).cloned().unwrap_or_default());
            }
        }
        Table { headers, columns }
    }

    pub fn read_csv(path: &Path) -> Result<Self, MetaError> {
        let wrap = |source| MetaError::Csv { path: path.display().to_string(), source };
        let mut reader = csv::Reader::from_path(path).map_err(wrap)?;
        let headers = reader.headers().map_err(wrap)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            rows.push(rec.map_err(wrap)?.iter().map(String::from).collect());
        }
        Ok(Table::from_rows(headers, &rows))
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "?" | "NA" | "N/A" | "NaN" | "nan" | "null" | "None")
}

pub fn compute(table: &Table, target: &str, task: TaskSpec) -> Result<MetaFeatures, MetaError> {
    let target_idx = table
        .headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| MetaError::MissingTarget(target.to_string()))?;
    let rows = table.rows();
    if rows == 0 {
        return Err(MetaError::NoRows);
    }
    let features: Vec<&Vec<String>> = table
        .columns
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target_idx)
        .map(|(_, c)| c)
        .collect();
    let n_cols = features.len();

    let cells = (rows * n_cols).max(1) as f64;
    let missing = features
        .iter()
        .flat_map(|c| c.iter())
        .filter(|v| is_missing(v))
        .count() as f64;
    let categorical = features
        .iter()
        .filter(|c| c.iter().any(|v| !is_missing(v) && v.trim().parse::<f64>().is_err()))
        .count();
    let frac_cat = if n_cols == 0 { 0.0 } else { categorical as f64 / n_cols as f64 };

    let (n_classes, entropy) = match task.kind() {
        TaskKind::Regression => (0.0, 0.0),
        TaskKind::Classification => {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for v in &table.columns[target_idx] {
                *counts.entry(v.trim()).or_default() += 1;
            }
            let mut freqs: Vec<usize> = counts.values().copied().collect();
            freqs.sort_unstable();
            let h = freqs
                .iter()
                .map(|&c| {
                    let p = c as f64 / rows as f64;
                    -p * p.ln()
                })
                .sum::<f64>();
            (counts.len() as f64, h.max(0.0))
        }
    };

    Ok(MetaFeatures([
        (1.0 + rows as f64).ln(),
        (1.0 + n_cols as f64).ln(),
        missing / cells,
        frac_cat,
        n_classes,
        entropy,
        (rows as f64 / n_cols.max(1) as f64).min(RATIO_CAP),
        1.0,
    ]))
}
