//! U-Net style disparity decoder with sigmoid heads at four scales.

use candle_core::Tensor;
use candle_nn::{Conv2d, Module};

use super::layers::{conv, upsample2};
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const NUM_SCALES: usize = 4;

/// Decoder widths for an encoder of the given base width.
pub fn decoder_channels(base_width: usize) -> [usize; 5] {
    [16, 32, 64, 128, 256].map(|c| (c * base_width / 64).max(8))
}

pub struct DepthDecoder {
    up: Vec<(Conv2d, Conv2d)>,
    heads: Vec<Conv2d>,
}

impl DepthDecoder {
    /// `enc` are the encoder widths at strides 2..32, `dec` the decoder widths.
    pub fn new(store: &mut ParamStore, name: &str, enc: [usize; 5], dec: [usize; 5]) -> Result<Self> {
        let mut up = Vec::with_capacity(5);
        for i in 0..5 {
            let cin = if i == 4 { enc[4] } else { dec[i + 1] };
            let skip = if i > 0 { enc[i - 1] } else { 0 };
            up.push((
                conv(store, &format!("{name}.up{i}.0"), cin, dec[i], 3, 1, true)?,
                conv(store, &format!("{name}.up{i}.1"), dec[i] + skip, dec[i], 3, 1, true)?,
            ));
        }
        let heads = (0..NUM_SCALES)
            .map(|s| conv(store, &format!("{name}.disp{s}"), dec[s], 1, 3, 1, true))
            .collect::<Result<_>>()?;
        Ok(Self { up, heads })
    }

    /// `x` is the stride-32 feature and `skips` the encoder features at
    /// strides 2, 4, 8 and 16. Returns disparities in `(0, 1)`, index `s`
    /// at stride `2^s`.
    pub fn forward(&self, x: &Tensor, skips: &[Tensor]) -> Result<Vec<Tensor>> {
        if skips.len() != 4 {
            return Err(Error::shape(format!("decoder expects 4 skips, got {}", skips.len())));
        }
        let mut outs: Vec<Option<Tensor>> = vec![None; NUM_SCALES];
        let mut y = x.clone();
        for i in (0..5).rev() {
            let (c0, c1) = &self.up[i];
            y = upsample2(&c0.forward(&y)?.elu(1.0)?)?;
            if i > 0 {
                y = Tensor::cat(&[&y, &skips[i - 1]], 1)?;
            }
            y = c1.forward(&y)?.elu(1.0)?;
            if i < NUM_SCALES {
                outs[i] = Some(candle_nn::ops::sigmoid(&self.heads[i].forward(&y)?)?);
            }
        }
        Ok(outs.into_iter().flatten().collect())
    }
}
