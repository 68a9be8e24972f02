//! Evaluation metrics over masked pixel sets, accumulated in `f64`.

use std::fmt;

use crate::error::{invalid, Result};

pub const THRESHOLDS: [f64; 3] = [1.05, 1.10, 1.25];
pub const CSV_HEADER: &str = "rmse,rel,mae,d105,d110,d125";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub rel: f64,
    pub mae: f64,
    /// Percentages of pixels with `max(d/d*, d*/d)` strictly below each threshold.
    pub d105: f64,
    pub d110: f64,
    pub d125: f64,
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.rmse, self.rel, self.mae, self.d105, self.d110, self.d125
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.csv_row())
    }
}

/// Pools pixels from any number of maps before reducing.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccum {
    n: u64,
    sq: f64,
    rel: f64,
    abs: f64,
    hits: [u64; 3],
}

impl MetricsAccum {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds pixels where `mask` holds and `gt > 0`.
    pub fn add<P: Copy + Into<f64>>(&mut self, pred: &[P], gt: &[P], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != mask.len() {
            return Err(invalid(
                "metrics",
                format!("lengths differ: pred {}, gt {}, mask {}", pred.len(), gt.len(), mask.len()),
            ));
        }
        for ((&d, &t), &m) in pred.iter().zip(gt).zip(mask) {
            let (d, t): (f64, f64) = (d.into(), t.into());
            if !m || !(t > 0.0) {
                continue;
            }
            let e = d - t;
            self.n += 1;
            self.sq += e * e;
            self.abs += e.abs();
            self.rel += e.abs() / t;
            // A non-positive prediction is outside every threshold.
            let ratio = if d > 0.0 { (d / t).max(t / d) } else { f64::INFINITY };
            for (h, th) in self.hits.iter_mut().zip(THRESHOLDS) {
                if ratio < th {
                    *h += 1;
                }
            }
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(invalid("metrics", "no pixel with mask set and positive ground truth"));
        }
        let n = self.n as f64;
        let pct = |h: u64| 100.0 * h as f64 / n;
        Ok(MetricsReport {
            rmse: (self.sq / n).sqrt(),
            rel: self.rel / n,
            mae: self.abs / n,
            d105: pct(self.hits[0]),
            d110: pct(self.hits[1]),
            d125: pct(self.hits[2]),
        })
    }
}

pub fn metrics<P: Copy + Into<f64>>(pred: &[P], gt: &[P], mask: &[bool]) -> Result<MetricsReport> {
    let mut acc = MetricsAccum::new();
    acc.add(pred, gt, mask)?;
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_perfect() {
        let d = [0.5f32, 1.0, 2.0];
        let r = metrics(&d, &d, &[true; 3]).unwrap();
        assert_eq!(r, MetricsReport { rmse: 0.0, rel: 0.0, mae: 0.0, d105: 100.0, d110: 100.0, d125: 100.0 });
    }

    #[test]
    fn worked_example() {
        let r = metrics(&[1.0, 2.0, 4.0], &[2.0, 2.0, 2.0], &[true; 3]).unwrap();
        assert!((r.rmse - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.rel - 0.5).abs() < 1e-12);
        assert!((r.mae - 1.0).abs() < 1e-12);
        assert!((r.d125 - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn strict_threshold() {
        let r = metrics(&[1.25], &[1.0], &[true]).unwrap();
        assert_eq!(r.d125, 0.0);
    }

    #[test]
    fn excluded_pixels() {
        assert!(metrics(&[1.0, 2.0], &[0.0, -1.0], &[true, true]).is_err());
        assert!(metrics(&[1.0], &[1.0], &[false]).is_err());
        let r = metrics(&[1.0, 9.0], &[1.0, 0.0], &[true, true]).unwrap();
        assert_eq!(r.rmse, 0.0);
    }

    #[test]
    fn non_positive_prediction_misses_thresholds() {
        let r = metrics(&[-1.0, 0.0], &[1.0, 1.0], &[true, true]).unwrap();
        assert_eq!((r.d105, r.d110, r.d125), (0.0, 0.0, 0.0));
    }

    #[test]
    fn csv_format() {
        let r = metrics(&[1.0, 2.0, 4.0], &[2.0, 2.0, 2.0], &[true; 3]).unwrap();
        assert_eq!(r.csv_row(), "1.290994,0.500000,1.000000,33.333333,33.333333,33.333333");
    }
}
