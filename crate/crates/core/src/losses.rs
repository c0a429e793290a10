//! Training objectives: berHu regression, SSIM + L1 photometric error,
//! per-pixel minimum reprojection, auto-masking, edge-aware smoothness and
//! the per-mode total.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mode::Mode;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Lower bound for the adaptive berHu threshold.
pub const BERHU_MIN_DELTA: f64 = 1e-12;
/// Stand-in photometric error for pixels with no valid source.
pub const INVALID_LOSS: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// SSIM share of the photometric error.
    pub alpha: f64,
    /// Smoothness weight.
    pub nu: f64,
    /// Final sparse-supervision weight.
    pub lambda_max: f64,
    /// Iterations over which the sparse weight ramps up linearly.
    pub lambda_ramp: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            nu: 0.001,
            lambda_max: 1e-2,
            lambda_ramp: 1000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.nu >= 0.0 && self.lambda_max >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda_ramp == 0 {
            return Err(Error::Config("lambda_ramp must be positive".into()));
        }
        Ok(())
    }

    /// Sparse-supervision weight at a global iteration.
    pub fn lambda_at(&self, iteration: u64) -> f64 {
        let rate = 1.0 / self.lambda_ramp as f64;
        self.lambda_max * f64::min(1.0, rate * iteration as f64)
    }
}

/// Default sparse-supervision schedule: `1e-2 * min(1, 1e-3 * i)`.
pub fn lambda_schedule(iteration: u64) -> f64 {
    LossWeights::default().lambda_at(iteration)
}

/// Per-pixel loss `(B,1,H,W)` with its validity `(B,1,H,W)`.
#[derive(Clone, Debug)]
pub struct LossMap {
    pub loss: Tensor,
    pub valid: Tensor,
}

pub(crate) fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn ensure_same_dims(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Reverse Huber over masked pixels with the adaptive threshold
/// `0.2 * max |residual|`. Returns `0` when the mask is empty.
pub fn berhu(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    berhu_impl(pred, target, mask, None)
}

/// Reverse Huber with a fixed threshold.
pub fn berhu_with_threshold(pred: &Tensor, target: &Tensor, mask: &Tensor, delta: f64) -> Result<Tensor> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("berHu threshold must be positive, got {delta}")));
    }
    berhu_impl(pred, target, mask, Some(delta))
}

fn berhu_impl(pred: &Tensor, target: &Tensor, mask: &Tensor, delta: Option<f64>) -> Result<Tensor> {
    ensure_same_dims("berHu prediction/target", pred, target)?;
    ensure_same_dims("berHu prediction/mask", pred, mask)?;
    let count = scalar_f64(&mask.sum_all()?)?;
    if count <= 0.0 {
        return Ok(Tensor::zeros((), pred.dtype(), pred.device())?);
    }
    let r = (pred - target)?.abs()?.mul(mask)?;
    // The threshold is a statistic of the batch, not a differentiable quantity.
    let delta = match delta {
        Some(d) => d,
        None => 0.2 * scalar_f64(&r.max_all()?)?,
    }
    .max(BERHU_MIN_DELTA);
    let quad = r.sqr()?.affine(1.0 / (2.0 * delta), delta / 2.0)?;
    let per = r.le(delta)?.where_cond(&r, &quad)?;
    Ok(per.mul(mask)?.sum_all()?.affine(1.0 / count, 0.0)?)
}

fn reflect_pad1(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("SSIM needs at least 2x2 images, got {h}x{w}")));
    }
    let x = Tensor::cat(&[x.narrow(3, 1, 1)?, x.clone(), x.narrow(3, w - 2, 1)?], 3)?;
    Ok(Tensor::cat(&[x.narrow(2, 1, 1)?, x.clone(), x.narrow(2, h - 2, 1)?], 2)?)
}

/// 3x3 mean over a reflect-padded map.
fn box3(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let p = reflect_pad1(x)?;
    let row = ((p.narrow(3, 0, w)? + p.narrow(3, 1, w)?)? + p.narrow(3, 2, w)?)?;
    let col = ((row.narrow(2, 0, h)? + row.narrow(2, 1, h)?)? + row.narrow(2, 2, h)?)?;
    Ok(col.affine(1.0 / 9.0, 0.0)?)
}

/// Per-pixel, per-channel SSIM over 3x3 windows with reflection padding.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_dims("SSIM inputs", a, b)?;
    let mu_a = box3(a)?;
    let mu_b = box3(b)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let sigma_a = (box3(&a.sqr()?)? - &mu_aa)?;
    let sigma_b = (box3(&b.sqr()?)? - &mu_bb)?;
    let sigma_ab = (box3(&(a * b)?)? - &mu_ab)?;
    let num = (mu_ab.affine(2.0, SSIM_C1)? * sigma_ab.affine(2.0, SSIM_C2)?)?;
    let den = ((mu_aa + mu_bb)?.affine(1.0, SSIM_C1)? * (sigma_a + sigma_b)?.affine(1.0, SSIM_C2)?)?;
    Ok((num / den)?)
}

/// `alpha/2 * (1 - SSIM) + (1 - alpha) * L1`, averaged over channels.
pub fn photometric(target: &Tensor, warped: &Tensor, valid: &Tensor, alpha: f64) -> Result<LossMap> {
    ensure_same_dims("photometric inputs", target, warped)?;
    let (b, _, h, w) = target.dims4()?;
    if valid.dims() != [b, 1, h, w] {
        return Err(Error::shape(format!(
            "photometric validity {:?}, expected {:?}",
            valid.dims(),
            [b, 1, h, w]
        )));
    }
    let s = ssim(target, warped)?
        .affine(-0.5, 0.5)?
        .clamp(0.0, 1.0)?
        .mean_keepdim(1)?;
    let l1 = (target - warped)?.abs()?.mean_keepdim(1)?;
    let loss = (s.affine(alpha, 0.0)? + l1.affine(1.0 - alpha, 0.0)?)?;
    Ok(LossMap {
        loss,
        valid: valid.clone(),
    })
}

/// Per-pixel minimum over source views. Invalid pixels of a map do not take
/// part; the result is valid wherever any map is valid.
pub fn min_reprojection(maps: &[LossMap]) -> Result<LossMap> {
    let Some(first) = maps.first() else {
        return Err(Error::Domain("minimum reprojection over zero source views".into()));
    };
    if maps.len() == 1 {
        return Ok(first.clone());
    }
    let mut loss = masked_or_large(first)?;
    let mut valid = first.valid.clone();
    for m in &maps[1..] {
        ensure_same_dims("reprojection maps", &first.loss, &m.loss)?;
        loss = loss.minimum(&masked_or_large(m)?)?;
        valid = valid.maximum(&m.valid)?;
    }
    Ok(LossMap { loss, valid })
}

fn masked_or_large(m: &LossMap) -> Result<Tensor> {
    let large = m.loss.ones_like()?.affine(INVALID_LOSS, 0.0)?;
    Ok(m.valid.gt(0.5)?.where_cond(&m.loss, &large)?)
}

/// Binary mask `min warped < min identity`; ties count as static.
pub fn auto_mask(warped: &[LossMap], identity: &[Tensor]) -> Result<Tensor> {
    let Some(first_id) = identity.first() else {
        return Err(Error::Domain("auto-mask needs at least one identity loss".into()));
    };
    let min_warped = masked_or_large(&min_reprojection(warped)?)?.detach();
    let mut min_id = first_id.detach();
    for t in &identity[1..] {
        min_id = min_id.minimum(&t.detach())?;
    }
    ensure_same_dims("auto-mask inputs", &min_warped, &min_id)?;
    Ok(min_warped.lt(&min_id)?.to_dtype(min_warped.dtype())?)
}

/// Edge-aware smoothness of mean-normalized disparity. `disp` is `(B,1,H,W)`
/// and `image` `(B,C,H,W)` at the same resolution.
pub fn smoothness(disp: &Tensor, image: &Tensor) -> Result<Tensor> {
    let (b, one, h, w) = disp.dims4()?;
    let (bi, _, hi, wi) = image.dims4()?;
    if one != 1 || (b, h, w) != (bi, hi, wi) {
        return Err(Error::shape(format!(
            "smoothness disparity {:?} vs image {:?}",
            disp.dims(),
            image.dims()
        )));
    }
    if h < 2 || w < 2 {
        return Err(Error::shape("smoothness needs at least 2x2 maps"));
    }
    let mean = disp.mean_keepdim(2)?.mean_keepdim(3)?;
    let lowest = scalar_f64(&mean.min_all()?)?;
    if !(lowest > 0.0) {
        return Err(Error::Domain(format!(
            "disparity mean must be positive for normalization, got {lowest}"
        )));
    }
    let d = disp.broadcast_div(&mean)?;
    let dx = (d.narrow(3, 1, w - 1)? - d.narrow(3, 0, w - 1)?)?.abs()?;
    let dy = (d.narrow(2, 1, h - 1)? - d.narrow(2, 0, h - 1)?)?.abs()?;
    let ix = (image.narrow(3, 1, w - 1)? - image.narrow(3, 0, w - 1)?)?
        .abs()?
        .mean_keepdim(1)?;
    let iy = (image.narrow(2, 1, h - 1)? - image.narrow(2, 0, h - 1)?)?
        .abs()?
        .mean_keepdim(1)?;
    let sx = (dx * ix.neg()?.exp()?)?.mean_all()?;
    let sy = (dy * iy.neg()?.exp()?)?.mean_all()?;
    Ok((sx + sy)?)
}

/// Everything the per-mode total needs at one output scale. All maps are at
/// the input resolution.
#[derive(Clone, Debug)]
pub struct ScaleTerms {
    pub disp: Tensor,
    pub depth: Tensor,
    /// Photometric errors against each warped source view.
    pub reprojection: Vec<LossMap>,
}

#[derive(Clone, Debug)]
pub struct LossInputs<'a> {
    pub target: &'a Tensor,
    /// Indexed by scale; scale `s` was predicted at stride `2^s`.
    pub scales: &'a [ScaleTerms],
    /// Photometric errors of the unwarped sources, one per source view.
    pub identity: &'a [Tensor],
    /// Ground-truth depth and validity.
    pub ground_truth: Option<(&'a Tensor, &'a Tensor)>,
    /// Sparse depth input and its mask.
    pub sparse: Option<(&'a Tensor, &'a Tensor)>,
    pub iteration: u64,
}

/// Scalar total and its weighted parts; the parts sum to the total.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub view_synthesis: Tensor,
    pub smoothness: Tensor,
    pub sparsity: Tensor,
    pub supervised: Tensor,
    pub lambda: f64,
}

/// Host copies of a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub view_synthesis: f64,
    pub smoothness: f64,
    pub sparsity: f64,
    pub supervised: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            total: scalar_f64(&self.total)?,
            view_synthesis: scalar_f64(&self.view_synthesis)?,
            smoothness: scalar_f64(&self.smoothness)?,
            sparsity: scalar_f64(&self.sparsity)?,
            supervised: scalar_f64(&self.supervised)?,
            lambda: self.lambda,
        })
    }
}

/// Auto-masked mean of the minimum reprojection error over valid pixels.
pub fn view_synthesis_term(reprojection: &[LossMap], identity: &[Tensor]) -> Result<Tensor> {
    let min = min_reprojection(reprojection)?;
    let mu = auto_mask(reprojection, identity)?;
    let weight = (mu * &min.valid)?;
    let count = scalar_f64(&min.valid.sum_all()?)?;
    let masked = weight.gt(0.0)?.where_cond(&min.loss, &min.loss.zeros_like()?)?;
    Ok(masked.sum_all()?.affine(1.0 / count.max(1.0), 0.0)?)
}

/// Total loss for `mode`, averaged over output scales.
pub fn total_loss(mode: Mode, inputs: &LossInputs<'_>, weights: &LossWeights) -> Result<LossBreakdown> {
    let n_scales = inputs.scales.len();
    if n_scales == 0 {
        return Err(Error::MissingInput {
            mode: mode.as_str(),
            what: "disparity outputs",
        });
    }
    let zero = Tensor::zeros((), inputs.target.dtype(), inputs.target.device())?;
    let inv_scales = 1.0 / n_scales as f64;
    let mut view = zero.clone();
    let mut smooth = zero.clone();
    let mut sparse = zero.clone();
    let mut sup = zero.clone();
    let mut lambda = 0.0;

    match mode {
        Mode::Supervised => {
            let Some((gt, gt_mask)) = inputs.ground_truth else {
                return Err(Error::MissingInput {
                    mode: mode.as_str(),
                    what: "ground-truth depth",
                });
            };
            for s in inputs.scales {
                sup = (sup + berhu(&s.depth, gt, gt_mask)?)?;
            }
            sup = sup.affine(inv_scales, 0.0)?;
        }
        Mode::SelfPred | Mode::SelfComp => {
            if inputs.identity.is_empty() || inputs.scales.iter().any(|s| s.reprojection.is_empty()) {
                return Err(Error::MissingInput {
                    mode: mode.as_str(),
                    what: "source views",
                });
            }
            let sparse_in = if mode == Mode::SelfComp {
                match inputs.sparse {
                    Some(sp) => Some(sp),
                    None => {
                        return Err(Error::MissingInput {
                            mode: mode.as_str(),
                            what: "sparse depth",
                        })
                    }
                }
            } else {
                None
            };
            for (k, s) in inputs.scales.iter().enumerate() {
                view = (view + view_synthesis_term(&s.reprojection, inputs.identity)?)?;
                let sm = smoothness(&s.disp, inputs.target)?;
                smooth = (smooth + sm.affine(1.0 / (1u64 << k) as f64, 0.0)?)?;
                if let Some((sd, sm)) = sparse_in {
                    sparse = (sparse + berhu(&s.depth, sd, sm)?)?;
                }
            }
            view = view.affine(inv_scales, 0.0)?;
            smooth = smooth.affine(weights.nu * inv_scales, 0.0)?;
            if mode == Mode::SelfComp {
                lambda = weights.lambda_at(inputs.iteration);
                sparse = sparse.affine(lambda * inv_scales, 0.0)?;
            }
        }
    }
    let total = (((&view + &smooth)? + &sparse)? + &sup)?;
    Ok(LossBreakdown {
        total,
        view_synthesis: view,
        smoothness: smooth,
        sparsity: sparse,
        supervised: sup,
        lambda,
    })
}
