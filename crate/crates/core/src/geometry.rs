//! Pinhole camera model, rigid poses and differentiable inverse warping.
//!
//! Pixel `(x, y)` sits at integer coordinates with no half-pixel offset;
//! column `x` grows to the right and row `y` grows downwards. Camera frames
//! use the usual vision convention: `+x` right, `+y` down, `+z` forward.
//!
//! All tensor functions are batched. Images are `(B, C, H, W)`, depth maps
//! `(B, 1, H, W)`, point sets `(B, 3, N)` with `N = H * W` in row-major order,
//! and poses `(B, 6)` laid out as `[axis_angle(3), translation(3)]`.

use candle_core::{DType, Device, Tensor};
use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depth below which a projected point is considered degenerate. The
/// projection divides by `max(z, Z_MIN)` and masks the pixel out.
pub const Z_MIN: f64 = 1e-3;

/// Tolerance in pixels on the image bounds of a projection.
pub const BOUNDS_SLACK: f64 = 1e-4;

/// Below this squared rotation angle the Rodrigues coefficients switch to
/// their Taylor expansions, which keeps the map smooth through zero.
const SMALL_ANGLE_SQ: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Domain(format!(
                "focal lengths must be positive and finite, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain("image dimensions must be non-zero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::Domain(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Uniform rescale of the camera, e.g. `0.5` for a 2x downsampled image.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: (self.width as f64 * s).round() as usize,
            height: (self.height as f64 * s).round() as usize,
        }
    }

    /// Anisotropic rescale to a new image size.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera-frame point at depth `z` seen through pixel `(x, y)`.
    pub fn backproject_pixel(&self, x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) * z / self.fx, (y - self.cy) * z / self.fy, z)
    }

    /// Pixel coordinates of a camera-frame point; `None` when behind the camera.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= Z_MIN {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub(crate) fn check_size(&self, h: usize, w: usize) -> Result<()> {
        if h != self.height || w != self.width {
            return Err(Error::shape(format!(
                "tensor is {h}x{w} but intrinsics describe {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Relative camera motion as axis-angle rotation plus translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Rotation axis scaled by the angle in radians.
    pub axis_angle: [f64; 3],
    /// Translation in meters.
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(axis_angle: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            axis_angle,
            translation,
        }
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_scaled_axis(Vector3::from(self.axis_angle))
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation().matrix());
        m.fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&Vector3::from(self.translation));
        m
    }

    /// Inverse of a rigid 4x4 transform given as a pose.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let rot = Rotation3::from_matrix_unchecked(r);
        let aa = rot.scaled_axis();
        let t = m.fixed_view::<3, 1>(0, 3);
        Self {
            axis_angle: [aa.x, aa.y, aa.z],
            translation: [t[0], t[1], t[2]],
        }
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation().inverse();
        let t = -(r_inv * Vector3::from(self.translation));
        let aa = r_inv.scaled_axis();
        Self {
            axis_angle: [aa.x, aa.y, aa.z],
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        let [a, b, c] = self.axis_angle;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z]
    }

    /// Stack poses into a `(B, 6)` tensor.
    pub fn stack(poses: &[Pose], dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f64> = poses.iter().flat_map(|p| p.as_array()).collect();
        Ok(Tensor::from_vec(flat, (poses.len(), 6), device)?.to_dtype(dtype)?)
    }
}

/// Homogeneous pixel coordinates `(3, H*W)` of an image, row-major.
#[derive(Clone, Debug)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
    coords: Tensor,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize, dtype: DType, device: &Device) -> Result<Self> {
        let n = height * width;
        let mut data = vec![0f64; 3 * n];
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                data[i] = x as f64;
                data[n + i] = y as f64;
                data[2 * n + i] = 1.0;
            }
        }
        let coords = Tensor::from_vec(data, (3, n), device)?.to_dtype(dtype)?;
        Ok(Self {
            height,
            width,
            coords,
        })
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    /// Pixel coordinates `(2, H*W)` without the homogeneous row.
    pub fn xy(&self) -> Result<Tensor> {
        Ok(self.coords.narrow(0, 0, 2)?)
    }
}

/// Rodrigues' formula on a `(B, 6)` pose tensor, returning `(B, 4, 4)`.
///
/// With `invert` the inverse transform `[Rᵀ | -Rᵀt]` is returned instead.
pub fn pose_to_matrix(pose: &Tensor, invert: bool) -> Result<Tensor> {
    let (b, six) = pose.dims2()?;
    if six != 6 {
        return Err(Error::shape(format!("pose tensor must be (B, 6), got (B, {six})")));
    }
    let dtype = pose.dtype();
    let device = pose.device();
    let w = pose.narrow(1, 0, 3)?;
    let t = pose.narrow(1, 3, 3)?;

    let theta2 = w.sqr()?.sum_keepdim(1)?;
    let small = theta2.lt(SMALL_ANGLE_SQ)?;
    let ones = theta2.ones_like()?;
    let safe2 = small.where_cond(&ones, &theta2)?;
    let theta = safe2.sqrt()?;
    let a_exact = (theta.sin()? / &theta)?;
    let b_exact = ((1.0 - theta.cos()?)? / &safe2)?;
    let a_taylor = (1.0 - (&theta2 / 6.0)?)?;
    let b_taylor = (0.5 - (&theta2 / 24.0)?)?;
    let a = small.where_cond(&a_taylor, &a_exact)?.reshape((b, 1, 1))?;
    let bcoef = small.where_cond(&b_taylor, &b_exact)?.reshape((b, 1, 1))?;

    let wx = w.narrow(1, 0, 1)?;
    let wy = w.narrow(1, 1, 1)?;
    let wz = w.narrow(1, 2, 1)?;
    let zero = wx.zeros_like()?;
    let k = Tensor::cat(
        &[
            &zero,
            &wz.neg()?,
            &wy,
            &wz,
            &zero,
            &wx.neg()?,
            &wy.neg()?,
            &wx,
            &zero,
        ],
        1,
    )?
    .reshape((b, 3, 3))?;
    let k2 = k.matmul(&k)?;
    let eye = Tensor::eye(3, dtype, device)?.unsqueeze(0)?.broadcast_as((b, 3, 3))?;
    let mut r = ((eye + k.broadcast_mul(&a)?)? + k2.broadcast_mul(&bcoef)?)?;
    let mut t = t.unsqueeze(2)?;
    if invert {
        r = r.transpose(1, 2)?.contiguous()?;
        t = r.matmul(&t)?.neg()?;
    }
    let top = Tensor::cat(&[&r, &t], 2)?;
    let bottom = Tensor::new(&[0f64, 0.0, 0.0, 1.0], device)?
        .to_dtype(dtype)?
        .reshape((1, 1, 4))?
        .broadcast_as((b, 1, 4))?;
    Ok(Tensor::cat(&[&top, &bottom], 1)?)
}

/// Lift every pixel of a `(B, 1, H, W)` depth map to camera coordinates.
pub fn backproject(depth: &Tensor, intr: &Intrinsics) -> Result<Tensor> {
    let (b, c, h, w) = depth.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("depth must have one channel, got {c}")));
    }
    intr.check_size(h, w)?;
    let min = depth.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(min > 0.0) {
        return Err(Error::Domain(format!(
            "backprojection needs strictly positive depth, found {min}"
        )));
    }
    let rays = camera_rays(intr, depth.dtype(), depth.device())?;
    let z = depth.reshape((b, 1, h * w))?;
    Ok(rays.unsqueeze(0)?.broadcast_mul(&z)?)
}

/// Unit-depth rays `K⁻¹ [x, y, 1]ᵀ` for every pixel, `(3, H*W)`.
fn camera_rays(intr: &Intrinsics, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = (intr.height, intr.width);
    let n = h * w;
    let mut data = vec![0f64; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            data[i] = (x as f64 - intr.cx) / intr.fx;
            data[n + i] = (y as f64 - intr.cy) / intr.fy;
            data[2 * n + i] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, n), device)?.to_dtype(dtype)?)
}

/// Apply `(B, 4, 4)` rigid transforms to `(B, 3, N)` points.
pub fn transform_points(transform: &Tensor, points: &Tensor) -> Result<Tensor> {
    let rot = transform.narrow(1, 0, 3)?.narrow(2, 0, 3)?;
    let trans = transform.narrow(1, 0, 3)?.narrow(2, 3, 1)?;
    Ok(rot.matmul(points)?.broadcast_add(&trans)?)
}

/// Projected pixel coordinates plus the validity of each projection.
#[derive(Clone, Debug)]
pub struct Projection {
    /// `(B, 2, N)` pixel coordinates `(u, v)`.
    pub coords: Tensor,
    /// `(B, N)` mask, 1 where the point lies in front of the camera and
    /// inside `[0, W-1] x [0, H-1]`.
    pub in_bounds: Tensor,
}

pub fn project(points: &Tensor, intr: &Intrinsics) -> Result<Projection> {
    let (b, three, n) = points.dims3()?;
    if three != 3 {
        return Err(Error::shape(format!("points must be (B, 3, N), got (B, {three}, N)")));
    }
    let dtype = points.dtype();
    let x = points.narrow(1, 0, 1)?;
    let y = points.narrow(1, 1, 1)?;
    let z = points.narrow(1, 2, 1)?;
    let zc = z.maximum(Z_MIN)?;
    let u = (x / &zc)?.affine(intr.fx, intr.cx)?;
    let v = (y / &zc)?.affine(intr.fy, intr.cy)?;

    let in_front = z.gt(Z_MIN)?;
    // Round-trip error must not push border pixels out of the image.
    let u_ok = (u.ge(-BOUNDS_SLACK)? * u.le((intr.width - 1) as f64 + BOUNDS_SLACK)?)?;
    let v_ok = (v.ge(-BOUNDS_SLACK)? * v.le((intr.height - 1) as f64 + BOUNDS_SLACK)?)?;
    let in_bounds = ((in_front * u_ok)? * v_ok)?
        .reshape((b, n))?
        .to_dtype(dtype)?;
    let coords = Tensor::cat(&[&u, &v], 1)?;
    Ok(Projection { coords, in_bounds })
}

/// Bilinear lookup of `(B, C, H, W)` source values at `(B, 2, N)` coordinates.
///
/// Coordinates outside the image are clamped to the border; callers carry the
/// in-bounds mask separately. The result is `(B, C, N)` and differentiable
/// with respect to both the source values and the coordinates.
pub fn bilinear_sample(source: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = source.dims4()?;
    let (cb, two, n) = coords.dims3()?;
    if cb != b || two != 2 {
        return Err(Error::shape(format!(
            "coords must be ({b}, 2, N), got ({cb}, {two}, {n})"
        )));
    }
    let u = coords.narrow(1, 0, 1)?.clamp(0.0, (w - 1) as f64)?;
    let v = coords.narrow(1, 1, 1)?.clamp(0.0, (h - 1) as f64)?;
    let x0 = u.detach().floor()?.minimum(w.saturating_sub(2) as f64)?;
    let y0 = v.detach().floor()?.minimum(h.saturating_sub(2) as f64)?;
    let x1 = (&x0 + 1.0)?.minimum((w - 1) as f64)?;
    let y1 = (&y0 + 1.0)?.minimum((h - 1) as f64)?;
    let wx = (&u - &x0)?;
    let wy = (&v - &y0)?;

    let flat = source.contiguous()?.reshape((b, c, h * w))?;
    let gather = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        let idx = yy
            .affine(w as f64, 0.0)?
            .add(xx)?
            .to_dtype(DType::U32)?
            .broadcast_as((b, c, n))?
            .contiguous()?;
        Ok(flat.gather(&idx, 2)?)
    };
    let s00 = gather(&y0, &x0)?;
    let s01 = gather(&y0, &x1)?;
    let s10 = gather(&y1, &x0)?;
    let s11 = gather(&y1, &x1)?;

    let one_wx = (1.0 - &wx)?;
    let one_wy = (1.0 - &wy)?;
    let top = (s00.broadcast_mul(&one_wx)? + s01.broadcast_mul(&wx)?)?;
    let bottom = (s10.broadcast_mul(&one_wx)? + s11.broadcast_mul(&wx)?)?;
    Ok((top.broadcast_mul(&one_wy)? + bottom.broadcast_mul(&wy)?)?)
}

/// Synthesize the target view by sampling `source` through the target depth
/// and the transform from target to source camera.
///
/// Returns the warped `(B, C, H, W)` image and a `(B, 1, H, W)` in-bounds mask.
pub fn inverse_warp_with_transform(
    source: &Tensor,
    depth_target: &Tensor,
    transform: &Tensor,
    intr: &Intrinsics,
) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = source.dims4()?;
    let (db, _, dh, dw) = depth_target.dims4()?;
    if (db, dh, dw) != (b, h, w) {
        return Err(Error::shape(format!(
            "source is {b}x{h}x{w} but depth is {db}x{dh}x{dw}"
        )));
    }
    intr.check_size(h, w)?;
    let points = backproject(depth_target, intr)?;
    let moved = transform_points(transform, &points)?;
    let proj = project(&moved, intr)?;
    let warped = bilinear_sample(source, &proj.coords)?.reshape((b, c, h, w))?;
    let mask = proj.in_bounds.reshape((b, 1, h, w))?;
    Ok((warped, mask))
}

/// Inverse warp driven by a `(B, 6)` pose mapping target camera to source camera.
pub fn inverse_warp(
    source: &Tensor,
    depth_target: &Tensor,
    pose: &Tensor,
    intr: &Intrinsics,
) -> Result<(Tensor, Tensor)> {
    let transform = pose_to_matrix(pose, false)?;
    inverse_warp_with_transform(source, depth_target, &transform, intr)
}

/// Fraction of ones in a mask tensor, for diagnostics.
pub fn mask_fraction(mask: &Tensor) -> Result<f64> {
    Ok(mask
        .to_dtype(DType::F64)?
        .mean_all()?
        .to_scalar::<f64>()?)
}
