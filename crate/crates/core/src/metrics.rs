//! Disparity error statistics.
//!
//! Everything is computed in disparity space. Relative and log statistics
//! skip pixels whose ground truth is not positive, and clamp predictions to
//! [`MIN_PREDICTION`] so logs and ratios stay finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Tensor};

pub const MIN_PREDICTION: f64 = 1e-3;
pub const DEFAULT_BAD_PIXEL_THRESHOLD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// Percent of pixels off by more than 3 px and 5%.
    pub d1_all: f64,
    /// Fraction with `max(p/g, g/p) < 1.25`.
    pub delta_125: f64,
    /// Percent off by more than `bad_pixel_threshold`.
    pub bad_pixel_ratio: f64,
    pub bad_pixel_threshold: f64,
    pub mae: f64,
    pub valid_count: usize,
    /// Valid pixels left out of the relative and log statistics.
    pub nonpositive_gt_count: usize,
}

impl MetricSet {
    /// Column order of [`MetricSet::values`]; follows the benchmark table.
    pub const COLUMNS: [&'static str; 8] =
        ["abs_rel", "sq_rel", "rmse", "rmse_log", "d1_all", "delta_125", "bad_pixel_ratio", "mae"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.d1_all,
            self.delta_125,
            self.bad_pixel_ratio,
            self.mae,
        ]
    }

    /// Column-wise mean of per-frame rows.
    pub fn mean(rows: &[MetricSet]) -> Option<MetricSet> {
        let first = rows.first()?;
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricSet) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(MetricSet {
            abs_rel: avg(|m| m.abs_rel),
            sq_rel: avg(|m| m.sq_rel),
            rmse: avg(|m| m.rmse),
            rmse_log: avg(|m| m.rmse_log),
            d1_all: avg(|m| m.d1_all),
            delta_125: avg(|m| m.delta_125),
            bad_pixel_ratio: avg(|m| m.bad_pixel_ratio),
            bad_pixel_threshold: first.bad_pixel_threshold,
            mae: avg(|m| m.mae),
            valid_count: rows.iter().map(|m| m.valid_count).sum(),
            nonpositive_gt_count: rows.iter().map(|m| m.nonpositive_gt_count).sum(),
        })
    }
}

pub fn compute_metrics(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<MetricSet> {
    compute_metrics_with(pred, gt, valid, DEFAULT_BAD_PIXEL_THRESHOLD)
}

/// Statistics over pixels with `valid > 0`. Relative/log statistics are NaN
/// when no valid pixel has positive ground truth.
pub fn compute_metrics_with(pred: &Tensor, gt: &Tensor, valid: &Tensor, bad_threshold: f64) -> Result<MetricSet> {
    check_same_shape("metrics prediction", gt.shape(), pred.shape())?;
    check_same_shape("metrics mask", gt.shape(), valid.shape())?;

    let (mut n, mut n_pos) = (0usize, 0usize);
    let (mut abs, mut sq, mut d1, mut bad) = (0.0, 0.0, 0usize, 0usize);
    let (mut abs_rel, mut sq_rel, mut log_sq, mut delta) = (0.0, 0.0, 0.0, 0usize);
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(valid.data()) {
        if m <= 0.0 {
            continue;
        }
        n += 1;
        let e = (p - g).abs();
        abs += e;
        sq += e * e;
        if e > bad_threshold {
            bad += 1;
        }
        if e > 3.0 && (g <= 0.0 || e / g > 0.05) {
            d1 += 1;
        }
        if g > 0.0 {
            n_pos += 1;
            abs_rel += e / g;
            sq_rel += e * e / g;
            let pc = p.max(MIN_PREDICTION);
            log_sq += (pc.ln() - g.ln()).powi(2);
            if (pc / g).max(g / pc) < 1.25 {
                delta += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("metrics need a nonempty valid mask".into()));
    }
    let (nf, pf) = (n as f64, n_pos as f64);
    let rel = |x: f64| if n_pos == 0 { f64::NAN } else { x / pf };
    Ok(MetricSet {
        abs_rel: rel(abs_rel),
        sq_rel: rel(sq_rel),
        rmse: (sq / nf).sqrt(),
        rmse_log: rel(log_sq).sqrt(),
        d1_all: 100.0 * d1 as f64 / nf,
        delta_125: rel(delta as f64),
        bad_pixel_ratio: 100.0 * bad as f64 / nf,
        bad_pixel_threshold: bad_threshold,
        mae: abs / nf,
        valid_count: n,
        nonpositive_gt_count: n - n_pos,
    })
}
