//! RMSE-by-horizon evaluation, experiment drivers, and reference comparison.

pub mod artifacts;
pub mod experiment;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Point, TrajectoryGaussian};

pub use artifacts::{emit_artifacts, ellipse_axes, plot_run, sha256_hex, Manifest};
pub use experiment::{run_experiment, EvalConfig, Experiment, ExperimentResult, RunRecord, SegmentError};

pub const DEFAULT_HORIZONS_S: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

/// Step index of the prediction made `h` seconds ahead.
pub fn horizon_index(h: f64, sample_rate: f64) -> Result<usize> {
    let steps = (h * sample_rate).round();
    if !(steps >= 1.0) {
        return Err(Error::InvalidArgument(format!("horizon {h} s is shorter than one step")));
    }
    Ok(steps as usize - 1)
}

/// Euclidean error at each horizon.
pub fn horizon_errors(pred: &TrajectoryGaussian, truth: &[Point], sample_rate: f64, horizons_s: &[f64]) -> Result<Vec<f64>> {
    let available = pred.horizon().min(truth.len());
    horizons_s
        .iter()
        .map(|&h| {
            let i = horizon_index(h, sample_rate)?;
            if i >= available {
                return Err(Error::HorizonMismatch { expected: i + 1, got: available });
            }
            let p = pred.means()[i];
            Ok((p[0] - truth[i][0]).hypot(p[1] - truth[i][1]))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseTable {
    pub horizons_s: Vec<f64>,
    /// Meters.
    pub rmse: Vec<f64>,
    pub counts: Vec<usize>,
}

impl RmseTable {
    /// Root mean square of per-sample error rows (one error per horizon).
    pub fn from_errors<'a>(horizons_s: &[f64], rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut sums = vec![0.0; horizons_s.len()];
        let mut n = 0usize;
        for row in rows {
            if row.len() != horizons_s.len() {
                return Err(Error::Shape(format!("error row has {} entries for {} horizons", row.len(), horizons_s.len())));
            }
            for (s, e) in sums.iter_mut().zip(row) {
                *s += e * e;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { horizons_s: horizons_s.to_vec(), rmse: sums.iter().map(|s| (s / n as f64).sqrt()).collect(), counts: vec![n; horizons_s.len()] })
    }

    /// Per-horizon average of several tables weighted by their sample counts.
    pub fn count_weighted_mean(tables: &[RmseTable]) -> Result<Self> {
        let first = tables.first().ok_or(Error::EmptyDataset)?;
        let k = first.horizons_s.len();
        let mut weighted = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for t in tables {
            if t.horizons_s != first.horizons_s {
                return Err(Error::Shape("tables cover different horizons".into()));
            }
            for i in 0..k {
                weighted[i] += t.counts[i] as f64 * t.rmse[i];
                counts[i] += t.counts[i];
            }
        }
        if counts.contains(&0) {
            return Err(Error::EmptyDataset);
        }
        let rmse = weighted.iter().zip(&counts).map(|(w, c)| w / *c as f64).collect();
        Ok(Self { horizons_s: first.horizons_s.clone(), rmse, counts })
    }

    /// RMSE at `h` seconds, if tabulated.
    pub fn at(&self, h: f64) -> Option<f64> {
        self.horizons_s.iter().position(|x| *x == h).map(|i| self.rmse[i])
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("horizon_s\trmse_m\tcount\n");
        for i in 0..self.rmse.len() {
            s.push_str(&format!("{}\t{}\t{}\n", self.horizons_s[i], self.rmse[i], self.counts[i]));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut t = RmseTable { horizons_s: Vec::new(), rmse: Vec::new(), counts: Vec::new() };
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let parse_err = || Error::Parse { line: i + 1, message: format!("bad RMSE row {line:?}") };
            if cols.len() != 3 {
                return Err(parse_err());
            }
            t.horizons_s.push(cols[0].parse().map_err(|_| parse_err())?);
            t.rmse.push(cols[1].parse().map_err(|_| parse_err())?);
            t.counts.push(cols[2].parse().map_err(|_| parse_err())?);
        }
        if t.rmse.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(t)
    }
}

/// Pairs each prediction with its ground truth and tabulates RMSE.
pub fn rmse_by_horizon(pairs: &[(&TrajectoryGaussian, &[Point])], sample_rate: f64, horizons_s: &[f64]) -> Result<RmseTable> {
    let rows = pairs
        .iter()
        .map(|(p, t)| horizon_errors(p, t, sample_rate, horizons_s))
        .collect::<Result<Vec<_>>>()?;
    RmseTable::from_errors(horizons_s, rows.iter().map(Vec::as_slice))
}

/// Published full-scale results, meters, at 1 to 5 s.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceColumn {
    pub key: &'static str,
    pub label: &'static str,
    pub rmse: [f64; 5],
}

pub const REFERENCE_RESULTS: [ReferenceColumn; 5] = [
    ReferenceColumn { key: "cspdag", label: "CSP\u{2020}", rmse: [0.62, 1.29, 2.13, 3.20, 4.52] },
    ReferenceColumn { key: "cspstar", label: "CSP*", rmse: [0.54, 1.20, 2.03, 3.09, 4.39] },
    ReferenceColumn { key: "l1rbp", label: "L1-RBP", rmse: [0.53, 1.19, 1.95, 2.87, 3.97] },
    ReferenceColumn { key: "l1mfrbp", label: "L1-MFRBP", rmse: [0.54, 1.20, 1.99, 2.97, 4.16] },
    ReferenceColumn { key: "planning", label: "L1-MFRBP (planning)", rmse: [0.54, 1.19, 1.95, 2.88, 4.01] },
];

pub fn reference_column(key: &str) -> Result<&'static ReferenceColumn> {
    REFERENCE_RESULTS.iter().find(|c| c.key == key).ok_or_else(|| Error::UnknownReference(key.to_string()))
}

pub const DISCLAIMER: &str =
    "reference values are full-scale NGSIM results and are not expected to match desk-scale runs";

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub horizon_s: f64,
    pub ours: f64,
    pub reference: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub column: &'static ReferenceColumn,
    pub rows: Vec<ComparisonRow>,
}

/// Side-by-side comparison of `table` with a reference column; only whole-second
/// horizons from 1 to 5 s are compared.
pub fn reference_compare(table: &RmseTable, key: &str) -> Result<ComparisonReport> {
    let column = reference_column(key)?;
    let mut rows = Vec::new();
    for (i, &h) in table.horizons_s.iter().enumerate() {
        if h.fract() == 0.0 && (1.0..=5.0).contains(&h) {
            let reference = column.rmse[h as usize - 1];
            rows.push(ComparisonRow { horizon_s: h, ours: table.rmse[i], reference, delta: table.rmse[i] - reference });
        }
    }
    Ok(ComparisonReport { column, rows })
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# RMSE in meters; reference column {}", self.column.label)?;
        writeln!(f, "# note: {DISCLAIMER}")?;
        writeln!(f, "{:>9}  {:>10}  {:>10}  {:>10}", "horizon_s", "ours_m", "reference_m", "delta_m")?;
        for r in &self.rows {
            writeln!(f, "{:>9}  {:>10.4}  {:>10.2}  {:>+10.4}", r.horizon_s, r.ours, r.reference, r.delta)?;
        }
        Ok(())
    }
}
