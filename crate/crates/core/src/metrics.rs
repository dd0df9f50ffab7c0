//! Depth-map evaluation against ground truth.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::DepthMap;

/// Default evaluation range in meters.
pub const MAX_EVAL_DEPTH: f64 = 7.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    /// Fraction of the evaluation set where the prediction is valid.
    pub valid_fraction: f64,
    pub rmse: f64,
    pub mae: f64,
    pub l1_rel: f64,
    pub l1_inv: f64,
    pub delta1: f64,
    pub acc_001: f64,
    pub acc_005: f64,
    pub acc_010: f64,
}

impl MetricsReport {
    /// `(key, value)` pairs in serialization order.
    pub fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("valid_fraction", self.valid_fraction),
            ("rmse", self.rmse),
            ("mae", self.mae),
            ("l1_rel", self.l1_rel),
            ("l1_inv", self.l1_inv),
            ("delta1", self.delta1),
            ("acc_001", self.acc_001),
            ("acc_005", self.acc_005),
            ("acc_010", self.acc_010),
        ]
    }

    /// All entries on one line, space separated.
    pub fn to_line(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One `key=value` per line.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Errors over pixels where ground truth is valid and within `max_depth`
/// and the prediction is valid and positive. Thresholds are strict.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, max_depth: f64) -> Result<MetricsReport> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let (mut set, mut n) = (0usize, 0usize);
    let mut sums = [0.0f64; 8];
    for (i, (&g, &g_ok)) in gt.values().iter().zip(gt.mask()).enumerate() {
        if !g_ok || !(g > 0.0) || g > max_depth {
            continue;
        }
        set += 1;
        if !pred.mask()[i] || !(pred.values()[i] > 0.0) {
            continue;
        }
        n += 1;
        let p = pred.values()[i];
        let e = (p - g).abs();
        sums[0] += e * e;
        sums[1] += e;
        sums[2] += e / g;
        sums[3] += (1.0 / p - 1.0 / g).abs();
        sums[4] += ((p / g).max(g / p) < 1.25) as u8 as f64;
        sums[5] += (e < 0.01) as u8 as f64;
        sums[6] += (e < 0.05) as u8 as f64;
        sums[7] += (e < 0.10) as u8 as f64;
    }
    if set == 0 {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    if n == 0 {
        return Err(Error::Validation(
            "prediction has no valid pixel in the evaluation set".into(),
        ));
    }
    let m = sums.map(|s| s / n as f64);
    Ok(MetricsReport {
        valid_fraction: n as f64 / set as f64,
        rmse: m[0].sqrt(),
        mae: m[1],
        l1_rel: m[2],
        l1_inv: m[3],
        delta1: m[4],
        acc_001: m[5],
        acc_005: m[6],
        acc_010: m[7],
    })
}
