//! Standard depth-evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::mask::BinaryMask;
use crate::raster::Raster;

/// δ thresholds 1.25, 1.25², 1.25³ (exact in binary floating point).
pub const DELTA_THRESHOLDS: [f64; 3] = [1.25, 1.5625, 1.953125];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub median_scale: bool,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            median_scale: true,
            min_depth: 1e-3,
            max_depth: 80.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

impl MetricsReport {
    /// Unweighted mean of per-image reports; `n_pixels` is summed.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            abs_rel: avg(|r| r.abs_rel),
            sq_rel: avg(|r| r.sq_rel),
            rmse: avg(|r| r.rmse),
            rmse_log: avg(|r| r.rmse_log),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            n_pixels: reports.iter().map(|r| r.n_pixels).sum(),
        })
    }
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, &mut upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Metrics over pixels that are set in `valid` and whose ground truth lies
/// in `[min_depth, max_depth]`. With median scaling, predictions are first
/// multiplied by `median(gt)/median(pred)`; they are then clamped to the
/// depth range.
pub fn depth_metrics(pred: &Raster, gt: &Raster, valid: &BinaryMask, cfg: &MetricsConfig) -> Result<MetricsReport> {
    pred.expect_single_channel("predicted depth")?;
    gt.expect_single_channel("ground-truth depth")?;
    check_dims(pred.dims(), gt.dims())?;
    check_dims(pred.dims(), valid.dims())?;
    let widen = |r: &Raster| r.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    depth_metrics_values(&widen(pred), &widen(gt), valid.data(), cfg)
}

/// [`depth_metrics`] on flat `f64` buffers of equal length.
pub fn depth_metrics_values(pred: &[f64], gt: &[f64], valid: &[bool], cfg: &MetricsConfig) -> Result<MetricsReport> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::InvalidArgument(format!(
            "buffer lengths differ: pred {}, gt {}, valid {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    if !(cfg.min_depth > 0.0 && cfg.min_depth < cfg.max_depth) {
        return Err(Error::InvalidArgument(format!(
            "invalid depth range [{}, {}]",
            cfg.min_depth, cfg.max_depth
        )));
    }
    let (mut p, g): (Vec<f64>, Vec<f64>) = (0..pred.len())
        .filter(|&i| valid[i])
        .map(|i| (pred[i], gt[i]))
        .filter(|&(_, g)| g >= cfg.min_depth && g <= cfg.max_depth)
        .unzip();
    if p.is_empty() {
        return Err(Error::EmptySupport);
    }
    if p.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("non-positive predicted depth in support".into()));
    }
    if cfg.median_scale {
        let scale = median(&mut g.clone()) / median(&mut p.clone());
        for v in &mut p {
            *v *= scale;
        }
    }
    for v in &mut p {
        *v = v.clamp(cfg.min_depth, cfg.max_depth);
    }

    let n = p.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (&p, &g) in p.iter().zip(&g) {
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        sq_log += (p.ln() - g.ln()).powi(2);
        // max(p/g, g/p) < T  ⇔  p < T·g and g < T·p, exact for these T.
        for (hit, t) in hits.iter_mut().zip(DELTA_THRESHOLDS) {
            if p < t * g && g < t * p {
                *hit += 1;
            }
        }
    }
    Ok(MetricsReport {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
        n_pixels: p.len(),
    })
}
