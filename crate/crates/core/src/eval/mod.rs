//! Depth metrics, median scaling, temporal error and accumulated RMSE.
//!
//! Everything here runs on host buffers in `f64`.

mod report;

use serde::{Deserialize, Serialize};

pub use report::{emit_report, Curve, ReportRow, SweepSeries, REPORT_COLUMNS};

use crate::error::{Error, Result};
use crate::maps::{DepthMap, ValidityMask};

/// Image-relative crop `[top, bottom) x [left, right)` as fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crop {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl Crop {
    /// The crop customarily used on the KITTI Eigen test split.
    pub fn eigen() -> Self {
        Self {
            top: 0.408_108_11,
            bottom: 0.991_891_89,
            left: 0.035_947_71,
            right: 0.964_052_29,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Predictions and ground truth beyond this depth are capped / ignored.
    pub cap: f64,
    pub min_depth: f64,
    /// `None` picks median scaling by training mode.
    pub median_scaling: Option<bool>,
    pub arte_epsilon: f64,
    pub crop: Option<Crop>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cap: 80.0,
            min_depth: 1e-3,
            median_scaling: None,
            arte_epsilon: 1e-3,
            crop: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.cap > self.min_depth) {
            return Err(Error::Config(format!(
                "evaluation range [{}, {}] is invalid",
                self.min_depth, self.cap
            )));
        }
        if !(self.arte_epsilon > 0.0) {
            return Err(Error::Config("arte_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub rmse_log: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl DepthMetrics {
    pub fn mean(items: &[DepthMetrics]) -> Option<DepthMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut m = DepthMetrics::default();
        for x in items {
            m.rmse += x.rmse / n;
            m.rmse_log += x.rmse_log / n;
            m.abs_rel += x.abs_rel / n;
            m.sq_rel += x.sq_rel / n;
            m.d1 += x.d1 / n;
            m.d2 += x.d2 / n;
            m.d3 += x.d3 / n;
        }
        Some(m)
    }
}

fn check_sizes(pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask) -> Result<()> {
    if !pred.same_size(gt) || mask.width != gt.width || mask.height != gt.height {
        return Err(Error::shape(format!(
            "prediction {}x{}, ground truth {}x{}, mask {}x{}",
            pred.width, pred.height, gt.width, gt.height, mask.width, mask.height
        )));
    }
    Ok(())
}

/// Pixels with ground truth in `(min_depth, cap]`, inside the crop.
pub fn eval_mask(gt: &DepthMap, cfg: &EvalConfig) -> ValidityMask {
    let (w, h) = (gt.width, gt.height);
    let (x0, x1, y0, y1) = match cfg.crop {
        Some(c) => (
            (c.left * w as f64) as usize,
            (c.right * w as f64) as usize,
            (c.top * h as f64) as usize,
            (c.bottom * h as f64) as usize,
        ),
        None => (0, w, 0, h),
    };
    let mut m = ValidityMask::empty(w, h);
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            let d = gt.get(x, y) as f64;
            m.data[y * w + x] = d > cfg.min_depth && d <= cfg.cap;
        }
    }
    m
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rescale `pred` by `median(gt) / median(pred)` over the mask.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask) -> Result<(DepthMap, f64)> {
    check_sizes(pred, gt, mask)?;
    let idx: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i]).collect();
    if idx.is_empty() {
        return Err(Error::Domain("median scaling over an empty mask".into()));
    }
    let mg = median(idx.iter().map(|&i| gt.data[i] as f64).collect());
    let mp = median(idx.iter().map(|&i| pred.data[i] as f64).collect());
    if !(mp > 0.0) {
        return Err(Error::Domain(format!("median prediction {mp} is not positive")));
    }
    let s = mg / mp;
    let scaled = DepthMap::new(
        pred.width,
        pred.height,
        pred.data.iter().map(|&p| (p as f64 * s) as f32).collect(),
    )?;
    Ok((scaled, s))
}

/// Standard depth metrics over the mask, with predictions clamped to
/// `[min_depth, cap]`.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask, cfg: &EvalConfig) -> Result<DepthMetrics> {
    check_sizes(pred, gt, mask)?;
    let mut n = 0usize;
    let (mut se, mut sle, mut ar, mut sr) = (0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    for i in 0..mask.data.len() {
        if !mask.data[i] {
            continue;
        }
        let g = gt.data[i] as f64;
        if !(g > 0.0) {
            return Err(Error::Domain("mask selects a pixel without ground truth".into()));
        }
        let p = (pred.data[i] as f64).clamp(cfg.min_depth, cfg.cap);
        let diff = p - g;
        se += diff * diff;
        let ld = p.ln() - g.ln();
        sle += ld * ld;
        ar += diff.abs() / g;
        sr += diff * diff / g;
        let ratio = (p / g).max(g / p);
        for (k, t) in [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
            if ratio < *t {
                within[k] += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Domain("depth metrics over an empty mask".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        rmse: (se / nf).sqrt(),
        rmse_log: (sle / nf).sqrt(),
        abs_rel: ar / nf,
        sq_rel: sr / nf,
        d1: within[0] as f64 / nf,
        d2: within[1] as f64 / nf,
        d3: within[2] as f64 / nf,
    })
}

/// Absolute relative temporal error: for each consecutive pair, the mean
/// over co-valid pixels of `| |p_i - p_{i-1}| - |g_i - g_{i-1}| | / (|g_i - g_{i-1}| + eps)`,
/// then the mean over pairs. Pairs without co-valid pixels are skipped.
pub fn arte(preds: &[DepthMap], gts: &[DepthMap], masks: &[ValidityMask], cfg: &EvalConfig) -> Result<f64> {
    if preds.len() != gts.len() || preds.len() != masks.len() {
        return Err(Error::shape("ARTE needs as many predictions, ground truths and masks"));
    }
    if preds.len() < 2 {
        return Err(Error::Domain("ARTE needs at least two frames".into()));
    }
    for i in 0..preds.len() {
        check_sizes(&preds[i], &gts[i], &masks[i])?;
    }
    let clamp = |v: f32| (v as f64).clamp(cfg.min_depth, cfg.cap);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 1..preds.len() {
        let mut acc = 0.0;
        let mut n = 0usize;
        for j in 0..masks[i].data.len() {
            if !(masks[i].data[j] && masks[i - 1].data[j]) {
                continue;
            }
            let dp = (clamp(preds[i].data[j]) - clamp(preds[i - 1].data[j])).abs();
            let dg = (gts[i].data[j] as f64 - gts[i - 1].data[j] as f64).abs();
            acc += (dp - dg).abs() / (dg + cfg.arte_epsilon);
            n += 1;
        }
        if n > 0 {
            total += acc / n as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Domain("no frame pair has co-valid pixels".into()));
    }
    Ok(total / pairs as f64)
}

/// Running mean of per-frame RMSE values.
pub fn accumulated_mean(per_frame: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(per_frame.len());
    let mut sum = 0.0;
    for (k, v) in per_frame.iter().enumerate() {
        sum += v;
        out.push(sum / (k + 1) as f64);
    }
    out
}

/// Accumulated average RMSE curve over a sequence.
pub fn accumulated_rmse(preds: &[DepthMap], gts: &[DepthMap], masks: &[ValidityMask], cfg: &EvalConfig) -> Result<Vec<f64>> {
    if preds.is_empty() || preds.len() != gts.len() || preds.len() != masks.len() {
        return Err(Error::shape("accumulated RMSE needs matching, non-empty sequences"));
    }
    let per = (0..preds.len())
        .map(|i| depth_metrics(&preds[i], &gts[i], &masks[i], cfg).map(|m| m.rmse))
        .collect::<Result<Vec<_>>>()?;
    Ok(accumulated_mean(&per))
}

/// Per-sequence evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEvaluation {
    /// Mean of per-frame metrics.
    pub metrics: DepthMetrics,
    pub per_frame: Vec<DepthMetrics>,
    pub scales: Vec<f64>,
    pub arte: Option<f64>,
    pub accumulated_rmse: Vec<f64>,
}

/// Evaluate a predicted sequence. Frames whose mask is empty are skipped.
pub fn evaluate_sequence(preds: &[DepthMap], gts: &[DepthMap], cfg: &EvalConfig, median_scaling: bool) -> Result<SequenceEvaluation> {
    cfg.validate()?;
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::shape("need one prediction per ground-truth frame"));
    }
    let mut scaled = Vec::with_capacity(preds.len());
    let mut kept_gt = Vec::with_capacity(preds.len());
    let mut masks = Vec::with_capacity(preds.len());
    let mut scales = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let m = eval_mask(g, cfg);
        if m.count() == 0 {
            continue;
        }
        let (p, s) = if median_scaling {
            median_scale(p, g, &m)?
        } else {
            (p.clone(), 1.0)
        };
        scaled.push(p);
        kept_gt.push(g.clone());
        masks.push(m);
        scales.push(s);
    }
    if scaled.is_empty() {
        return Err(Error::Domain("no frame has evaluable ground truth".into()));
    }
    let per_frame = (0..scaled.len())
        .map(|i| depth_metrics(&scaled[i], &kept_gt[i], &masks[i], cfg))
        .collect::<Result<Vec<_>>>()?;
    let arte = if scaled.len() >= 2 {
        arte(&scaled, &kept_gt, &masks, cfg).ok()
    } else {
        None
    };
    let accumulated = accumulated_mean(&per_frame.iter().map(|m| m.rmse).collect::<Vec<_>>());
    Ok(SequenceEvaluation {
        metrics: DepthMetrics::mean(&per_frame).unwrap_or_default(),
        per_frame,
        scales,
        arte,
        accumulated_rmse: accumulated,
    })
}
