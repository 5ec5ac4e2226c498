//! Depth evaluation metrics: RMSE, mean relative error and δ thresholds.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

/// Aggregated evaluation result. Deltas are percentages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixel_count: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "rmse,rel,delta1,delta2,delta3,pixel_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.rmse, self.rel, self.delta1, self.delta2, self.delta3, self.pixel_count
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim().split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse(format!("metrics row needs 6 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
        Ok(MetricsReport {
            rmse: num(f[0])?,
            rel: num(f[1])?,
            delta1: num(f[2])?,
            delta2: num(f[3])?,
            delta3: num(f[4])?,
            pixel_count: f[5].parse().map_err(|e| Error::Parse(format!("'{}': {e}", f[5])))?,
        })
    }

    /// Element-wise mean of several reports (pixel counts summed).
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Some(MetricsReport {
            rmse: avg(|r| r.rmse),
            rel: avg(|r| r.rel),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            pixel_count: reports.iter().map(|r| r.pixel_count).sum(),
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rmse={:.4} rel={:.4} d1={:.2} d2={:.2} d3={:.2} (n={})",
            self.rmse, self.rel, self.delta1, self.delta2, self.delta3, self.pixel_count
        )
    }
}

/// Running sums that pool metrics over many images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    sq_err: f64,
    rel_err: f64,
    within: [usize; 3],
    count: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every masked pixel of one prediction.
    pub fn add(&mut self, pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || pred.len() != mask.len() {
            return shape_err(format!(
                "metrics over {} predictions, {} targets, {} mask entries",
                pred.len(),
                gt.len(),
                mask.len()
            ));
        }
        for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
            if !m {
                continue;
            }
            if !(g > 0.0) {
                return invalid(format!("ground truth {g} inside the valid mask"));
            }
            let e = p - g;
            self.sq_err += e * e;
            self.rel_err += e.abs() / g;
            let ratio = (p / g).max(g / p);
            let mut thresh = 1.25;
            for w in self.within.iter_mut() {
                if ratio < thresh {
                    *w += 1;
                }
                thresh *= 1.25;
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.sq_err += other.sq_err;
        self.rel_err += other.rel_err;
        for (a, b) in self.within.iter_mut().zip(other.within) {
            *a += b;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.count == 0 {
            return Err(Error::EmptyMask);
        }
        let n = self.count as f64;
        let pct = |k: usize| 100.0 * k as f64 / n;
        Ok(MetricsReport {
            rmse: (self.sq_err / n).sqrt(),
            rel: self.rel_err / n,
            delta1: pct(self.within[0]),
            delta2: pct(self.within[1]),
            delta3: pct(self.within[2]),
            pixel_count: self.count,
        })
    }
}

/// Metrics of one prediction against ground truth over `mask`.
///
/// δᵢ counts pixels with `max(pred/gt, gt/pred) < 1.25ⁱ` (strict).
pub fn compute_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    acc.add(pred, gt, mask)?;
    acc.finish()
}
