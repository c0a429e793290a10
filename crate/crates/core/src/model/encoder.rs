//! ResNet feature extractors and the image/sparse-depth fusion front end.

use candle_core::Tensor;
use candle_nn::{Conv2d, Module};

use super::layers::{conv, ConvBn};
use super::params::ParamStore;
use crate::error::{Error, Result};

const IMAGE_MEAN: f64 = 0.45;
const IMAGE_STD: f64 = 0.225;
/// Sparse depth enters the network in tens of meters.
const SPARSE_DEPTH_SCALE: f64 = 0.1;

/// Basic-block counts per stage for the supported depths.
pub fn resnet_blocks(depth: usize) -> Result<[usize; 4]> {
    match depth {
        10 => Ok([1, 1, 1, 1]),
        18 => Ok([2, 2, 2, 2]),
        34 => Ok([3, 4, 6, 3]),
        other => Err(Error::Config(format!(
            "unsupported encoder depth {other} (expected 10, 18 or 34)"
        ))),
    }
}

/// Output channels of the stem and the four stages.
pub fn resnet_channels(base_width: usize) -> [usize; 5] {
    let b = base_width;
    [b, b, 2 * b, 4 * b, 8 * b]
}

pub(crate) fn normalize_image(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(1.0 / IMAGE_STD, -IMAGE_MEAN / IMAGE_STD)?)
}

struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvBn::new(store, &format!("{name}.shortcut"), cin, cout, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            a: ConvBn::new(store, &format!("{name}.a"), cin, cout, 3, stride)?,
            b: ConvBn::new(store, &format!("{name}.b"), cout, cout, 3, 1)?,
            shortcut,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.a.forward_t(x, train)?.relu()?;
        let y = self.b.forward_t(&y, train)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward_t(x, train)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// ResNet trunk returning features at strides 2, 4, 8, 16 and 32.
pub struct ResnetEncoder {
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
    channels: [usize; 5],
}

impl ResnetEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        depth: usize,
        base_width: usize,
    ) -> Result<Self> {
        let blocks = resnet_blocks(depth)?;
        let channels = resnet_channels(base_width);
        let stem = ConvBn::new(store, &format!("{name}.stem"), in_channels, channels[0], 7, 2)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = channels[0];
        for (s, &n) in blocks.iter().enumerate() {
            let cout = channels[s + 1];
            let mut stage = Vec::with_capacity(n);
            for k in 0..n {
                let stride = if k == 0 && s > 0 { 2 } else { 1 };
                stage.push(BasicBlock::new(
                    store,
                    &format!("{name}.layer{}.{k}", s + 1),
                    cin,
                    cout,
                    stride,
                )?);
                cin = cout;
            }
            stages.push(stage);
        }
        Ok(Self {
            stem,
            stages,
            channels,
        })
    }

    pub fn channels(&self) -> [usize; 5] {
        self.channels
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = x.dims4()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "encoder input {h}x{w} is not divisible by 32"
            )));
        }
        let mut feats = Vec::with_capacity(5);
        let mut y = self.stem.forward_t(x, train)?.relu()?;
        feats.push(y.clone());
        y = y.max_pool2d(2)?;
        for stage in &self.stages {
            for block in stage {
                y = block.forward_t(&y, train)?;
            }
            feats.push(y.clone());
        }
        Ok(feats)
    }
}

/// Two-branch front end: image and sparse depth are embedded separately,
/// concatenated, then passed through a shared ResNet trunk.
pub struct FusedEncoder {
    image: [Conv2d; 2],
    sparse: [Conv2d; 2],
    trunk: ResnetEncoder,
}

impl FusedEncoder {
    pub fn new(store: &mut ParamStore, name: &str, depth: usize, base_width: usize) -> Result<Self> {
        let ci = (base_width / 2).max(8);
        let cd = (base_width / 4).max(8);
        Ok(Self {
            image: [
                conv(store, &format!("{name}.image.0"), 3, ci, 3, 1, true)?,
                conv(store, &format!("{name}.image.1"), ci, ci, 3, 1, true)?,
            ],
            sparse: [
                conv(store, &format!("{name}.sparse.0"), 2, cd, 3, 1, true)?,
                conv(store, &format!("{name}.sparse.1"), cd, cd, 3, 1, true)?,
            ],
            trunk: ResnetEncoder::new(store, &format!("{name}.trunk"), ci + cd, depth, base_width)?,
        })
    }

    pub fn channels(&self) -> [usize; 5] {
        self.trunk.channels()
    }

    /// `image` is `(B,3,H,W)`, `depth` and `mask` are `(B,1,H,W)`.
    pub fn forward_t(&self, image: &Tensor, depth: &Tensor, mask: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let xi = self.image[0].forward(&normalize_image(image)?)?.relu()?;
        let xi = self.image[1].forward(&xi)?.relu()?;
        let sp = Tensor::cat(&[&depth.affine(SPARSE_DEPTH_SCALE, 0.0)?, mask], 1)?;
        let xd = self.sparse[0].forward(&sp)?.relu()?;
        let xd = self.sparse[1].forward(&xd)?.relu()?;
        self.trunk.forward_t(&Tensor::cat(&[&xi, &xd], 1)?, train)
    }
}
