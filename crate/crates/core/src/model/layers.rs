//! Convolution helpers and resampling with full backward support.

use candle_core::{Tensor, D};
use candle_nn::{BatchNorm, Conv2d, Conv2dConfig, Module, ModuleT};

use super::params::ParamStore;
use crate::error::Result;

pub(crate) const BN_EPS: f64 = 1e-5;

/// Square convolution with `k / 2` zero padding.
pub(crate) fn conv(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    bias: bool,
) -> Result<Conv2d> {
    let weight = store.he_normal(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k)?;
    let bias = if bias {
        Some(store.constant(&format!("{name}.bias"), &[cout], 0.0, true)?)
    } else {
        None
    };
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(weight, bias, cfg))
}

pub(crate) fn batch_norm(store: &mut ParamStore, name: &str, c: usize) -> Result<BatchNorm> {
    let mean = store.constant(&format!("{name}.running_mean"), &[c], 0.0, false)?;
    let var = store.constant(&format!("{name}.running_var"), &[c], 1.0, false)?;
    let weight = store.constant(&format!("{name}.weight"), &[c], 1.0, true)?;
    let bias = store.constant(&format!("{name}.bias"), &[c], 0.0, true)?;
    Ok(BatchNorm::new(c, mean, var, weight, bias, BN_EPS)?)
}

/// Convolution followed by batch normalization.
pub(crate) struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: conv(store, &format!("{name}.conv"), cin, cout, k, stride, false)?,
            bn: batch_norm(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub(crate) fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.conv.forward(x)?, train)?)
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .unsqueeze(3)?
        .unsqueeze(5)?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// `(out, in)` matrix of linear interpolation weights with half-pixel centres.
fn interp_matrix(n_in: usize, n_out: usize) -> Vec<f32> {
    let mut m = vec![0f32; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let w = src - i0 as f64;
        m[i * n_in + i0] += (1.0 - w) as f32;
        m[i * n_in + i1] += w as f32;
    }
    m
}

/// Bilinear resize of `(B, C, H, W)` to `(B, C, height, width)`.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(interp_matrix(h, height), (height, h), dev)?.to_dtype(x.dtype())?;
    let aw = Tensor::from_vec(interp_matrix(w, width), (width, w), dev)?.to_dtype(x.dtype())?;
    let rows = ah.broadcast_matmul(&x.contiguous()?)?;
    Ok(rows.broadcast_matmul(&aw.t()?)?)
}

/// Mean over the two spatial dimensions.
pub(crate) fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
