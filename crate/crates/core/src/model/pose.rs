//! Relative camera motion from a pair of frames.

use candle_core::Tensor;
use candle_nn::{Conv2d, Module};

use super::encoder::{normalize_image, ResnetEncoder};
use super::layers::{conv, spatial_mean};
use super::params::ParamStore;
use crate::error::Result;

/// Small outputs keep early warps near identity.
const POSE_SCALE: f64 = 0.01;

pub struct PoseNet {
    encoder: ResnetEncoder,
    squeeze: Conv2d,
    convs: [Conv2d; 2],
    out: Conv2d,
}

impl PoseNet {
    pub fn new(store: &mut ParamStore, name: &str, depth: usize, base_width: usize) -> Result<Self> {
        let encoder = ResnetEncoder::new(store, &format!("{name}.encoder"), 6, depth, base_width)?;
        let top = encoder.channels()[4];
        let width = (256 * base_width / 64).max(16);
        Ok(Self {
            encoder,
            squeeze: conv(store, &format!("{name}.squeeze"), top, width, 1, 1, true)?,
            convs: [
                conv(store, &format!("{name}.conv0"), width, width, 3, 1, true)?,
                conv(store, &format!("{name}.conv1"), width, width, 3, 1, true)?,
            ],
            out: conv(store, &format!("{name}.out"), width, 6, 1, 1, true)?,
        })
    }

    /// `(B, 6)` axis-angle and translation of the rigid transform taking
    /// points in the camera of `first` into the camera of `second`.
    pub fn forward_t(&self, first: &Tensor, second: &Tensor, train: bool) -> Result<Tensor> {
        let x = Tensor::cat(&[&normalize_image(first)?, &normalize_image(second)?], 1)?;
        let feats = self.encoder.forward_t(&x, train)?;
        let mut y = self.squeeze.forward(&feats[4])?.relu()?;
        for c in &self.convs {
            y = c.forward(&y)?.relu()?;
        }
        let y = spatial_mean(&self.out.forward(&y)?)?;
        Ok(y.affine(POSE_SCALE, 0.0)?)
    }
}
