//! Host-side image and depth buffers and their tensor conversions.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Dense RGB frame, planar `C x H x W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "RGB buffer of {} values does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; 3 * width * height],
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?)
    }

    /// Inverse of [`Image::to_tensor`] for a single `(1, 3, H, W)` or `(3, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(w, h, data)
    }
}

/// Single-channel depth in meters; `0` marks a missing value.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "depth buffer of {} values does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn validity(&self) -> ValidityMask {
        ValidityMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&d| d > 0.0).collect(),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 1, self.height, self.width), device)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        let (h, w) = match dims {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::shape(format!("not a single depth map: {dims:?}"))),
        };
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(w, h, data)
    }

    pub fn same_size(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Binary per-pixel validity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl ValidityMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_subset_of(&self, other: &ValidityMask) -> bool {
        self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        ValidityMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }

    /// `(1, 1, H, W)` tensor of zeros and ones.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, (1, 1, self.height, self.width), device)?)
    }
}

/// Sparse depth input with its mask; values outside the mask are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepth {
    pub depth: DepthMap,
    pub mask: ValidityMask,
}

impl SparseDepth {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            depth: DepthMap::zeros(width, height),
            mask: ValidityMask::empty(width, height),
        }
    }

    pub fn to_tensors(&self, device: &Device) -> Result<(Tensor, Tensor)> {
        Ok((self.depth.to_tensor(device)?, self.mask.to_tensor(device)?))
    }
}
