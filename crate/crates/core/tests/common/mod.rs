//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recdepth::data::{default_intrinsics, render_frame, Corridor, Trajectory, World};
use recdepth::geometry::{backproject, inverse_warp, pose_to_matrix, project, transform_points, Intrinsics, Pose};
use recdepth::{DepthMap, Result, ValidityMask};

/// Smooth random image so bilinear kinks are rare under tiny perturbations.
fn smooth_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let (a, b, p, q) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen::<f64>() * 6.0, rng.gen::<f64>() * 6.0);
        for y in 0..h {
            for x in 0..w {
                out.push(0.5 + 0.3 * (a * x as f64 + p).sin() * (b * y as f64 + q).cos());
            }
        }
    }
    out
}

/// Scalar objective over the warp: a fixed random weighting of the
/// in-bounds warped values.
fn warp_objective(src: &Tensor, depth: &Tensor, pose: &Tensor, weight: &Tensor, intr: &Intrinsics) -> Result<Tensor> {
    let (warped, mask) = inverse_warp(src, depth, pose, intr)?;
    Ok(warped.broadcast_mul(&mask)?.mul(weight)?.sum_all()?)
}

fn near_kink(c: f64, n: usize, margin: f64) -> bool {
    if c < -margin || c > (n - 1) as f64 + margin {
        return false;
    }
    (c - c.round()).abs() < margin
}

/// Pixels whose projected sample lies within `margin` of a kink.
fn kink_pixels(depth: &[f64], pose: &[f64], intr: &Intrinsics, margin: f64) -> Result<Vec<usize>> {
    let dev = Device::Cpu;
    let (h, w) = (intr.height, intr.width);
    let d = Tensor::from_slice(depth, (1, 1, h, w), &dev)?;
    let p = Tensor::from_slice(pose, (1, 6), &dev)?;
    let pts = transform_points(&pose_to_matrix(&p, false)?, &backproject(&d, intr)?)?;
    let c = project(&pts, intr)?.coords.squeeze(0)?.to_vec2::<f64>()?;
    Ok((0..h * w)
        .filter(|&i| near_kink(c[0][i], w, margin) || near_kink(c[1][i], h, margin))
        .collect())
}

/// Largest relative error between autodiff and central differences over
/// one random 16x32 warp instance, checked for pose, depth and source.
pub fn warp_gradient_error(seed: u64) -> Result<f64> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (3, 16, 32);
    let intr = Intrinsics::new(
        rng.gen_range(18.0..26.0),
        rng.gen_range(18.0..26.0),
        15.5 + rng.gen_range(-1.0..1.0),
        7.5 + rng.gen_range(-1.0..1.0),
        w,
        h,
    )?;
    let src_v = smooth_image(&mut rng, c, h, w);
    let mut depth_v: Vec<f64> = (0..h * w).map(|_| rng.gen_range(3.0..8.0)).collect();
    let pose_v: Vec<f64> = (0..6)
        .map(|i| if i < 3 { rng.gen_range(-0.03..0.03) } else { rng.gen_range(-0.15..0.15) })
        .collect();
    // Redraw depths whose sample lands on a cell edge or the image border,
    // where bilinear sampling is not differentiable.
    for _ in 0..1000 {
        let near = kink_pixels(&depth_v, &pose_v, &intr, 1e-3)?;
        if near.is_empty() {
            break;
        }
        for i in near {
            depth_v[i] = rng.gen_range(3.0..8.0);
        }
    }
    let weight_v: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let src = Var::from_tensor(&Tensor::from_vec(src_v.clone(), (1, c, h, w), &dev)?)?;
    let depth = Var::from_tensor(&Tensor::from_vec(depth_v.clone(), (1, 1, h, w), &dev)?)?;
    let pose = Var::from_tensor(&Tensor::from_vec(pose_v.clone(), (1, 6), &dev)?)?;
    let weight = Tensor::from_vec(weight_v, (1, c, h, w), &dev)?;

    let loss = warp_objective(src.as_tensor(), depth.as_tensor(), pose.as_tensor(), &weight, &intr)?;
    let grads = loss.backward()?;
    let flat = |v: &Var| -> Result<Vec<f64>> {
        Ok(match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; v.elem_count()],
        })
    };
    let (g_src, g_depth, g_pose) = (flat(&src)?, flat(&depth)?, flat(&pose)?);

    let eval = |s: &[f64], d: &[f64], p: &[f64]| -> Result<f64> {
        let s = Tensor::from_slice(s, (1, c, h, w), &dev)?;
        let d = Tensor::from_slice(d, (1, 1, h, w), &dev)?;
        let p = Tensor::from_slice(p, (1, 6), &dev)?;
        Ok(warp_objective(&s, &d, &p, &weight, &intr)?.to_scalar::<f64>()?)
    };
    let eps = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..6 {
        let (mut a, mut b) = (pose_v.clone(), pose_v.clone());
        a[i] += eps;
        b[i] -= eps;
        numeric.push((eval(&src_v, &depth_v, &a)? - eval(&src_v, &depth_v, &b)?) / (2.0 * eps));
        analytic.push(g_pose[i]);
    }
    for _ in 0..12 {
        let i = rng.gen_range(0..h * w);
        let (mut a, mut b) = (depth_v.clone(), depth_v.clone());
        a[i] += eps;
        b[i] -= eps;
        numeric.push((eval(&src_v, &a, &pose_v)? - eval(&src_v, &b, &pose_v)?) / (2.0 * eps));
        analytic.push(g_depth[i]);
    }
    for _ in 0..12 {
        let i = rng.gen_range(0..c * h * w);
        let (mut a, mut b) = (src_v.clone(), src_v.clone());
        a[i] += eps;
        b[i] -= eps;
        numeric.push((eval(&a, &depth_v, &pose_v)? - eval(&b, &depth_v, &pose_v)?) / (2.0 * eps));
        analytic.push(g_src[i]);
    }
    // Error relative to the gradient block's scale, so near-zero entries
    // do not dominate.
    let blocks = [0..6, 6..18, 18..30];
    let mut worst: f64 = 0.0;
    for r in blocks {
        let scale = numeric[r.clone()].iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
        for i in r {
            worst = worst.max((analytic[i] - numeric[i]).abs() / scale);
        }
    }
    Ok(worst)
}

/// Naive per-pixel loop implementation of the standard metrics.
pub fn oracle_metrics(pred: &[f64], gt: &[f64], mask: &[bool], min: f64, cap: f64) -> [f64; 7] {
    let mut n = 0.0;
    let mut acc = [0.0f64; 7];
    for i in 0..gt.len() {
        if !mask[i] {
            continue;
        }
        let p = if pred[i] < min {
            min
        } else if pred[i] > cap {
            cap
        } else {
            pred[i]
        };
        let g = gt[i];
        n += 1.0;
        acc[0] += (p - g) * (p - g);
        acc[1] += (p.ln() - g.ln()) * (p.ln() - g.ln());
        acc[2] += (p - g).abs() / g;
        acc[3] += (p - g) * (p - g) / g;
        let r = if p / g > g / p { p / g } else { g / p };
        acc[4] += (r < 1.25) as u8 as f64;
        acc[5] += (r < 1.5625) as u8 as f64;
        acc[6] += (r < 1.953125) as u8 as f64;
    }
    [
        (acc[0] / n).sqrt(),
        (acc[1] / n).sqrt(),
        acc[2] / n,
        acc[3] / n,
        acc[4] / n,
        acc[5] / n,
        acc[6] / n,
    ]
}

/// Naive temporal error: per pair, mean of the per-pixel ratio over
/// pixels valid in both frames; then mean over pairs that have any.
pub fn oracle_arte(preds: &[Vec<f64>], gts: &[Vec<f64>], masks: &[Vec<bool>], min: f64, cap: f64, eps: f64) -> Option<f64> {
    let clamp = |v: f64| v.max(min).min(cap);
    let mut pair_sum = 0.0;
    let mut pairs = 0;
    for t in 1..preds.len() {
        let mut s = 0.0;
        let mut n = 0;
        for i in 0..preds[t].len() {
            if masks[t][i] && masks[t - 1][i] {
                let dp = (clamp(preds[t][i]) - clamp(preds[t - 1][i])).abs();
                let dg = (gts[t][i] - gts[t - 1][i]).abs();
                s += (dp - dg).abs() / (dg + eps);
                n += 1;
            }
        }
        if n > 0 {
            pair_sum += s / n as f64;
            pairs += 1;
        }
    }
    (pairs > 0).then(|| pair_sum / pairs as f64)
}

/// Random 8x8 metric instance: ground truth with holes, a noisy prediction
/// that sometimes leaves the evaluation range, and the matching mask.
pub fn metric_instance(rng: &mut ChaCha8Rng, min: f64, cap: f64) -> (DepthMap, DepthMap, ValidityMask) {
    let n = 64;
    let gt: Vec<f32> = (0..n)
        .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.5f32..90.0) })
        .collect();
    let pred: Vec<f32> = gt
        .iter()
        .map(|&g| {
            let base = if g > 0.0 { g } else { 20.0 };
            (base * rng.gen_range(0.5f32..1.8)).max(1e-4) + if rng.gen_bool(0.05) { 60.0 } else { 0.0 }
        })
        .collect();
    let mut mask: Vec<bool> = gt.iter().map(|&g| g as f64 > min && g as f64 <= cap).collect();
    if !mask.iter().any(|&m| m) {
        mask[0] = true;
    }
    let gt = DepthMap::new(8, 8, gt.iter().enumerate().map(|(i, &g)| if mask[i] && g == 0.0 { 1.0 } else { g }).collect()).unwrap();
    (
        DepthMap::new(8, 8, pred).unwrap(),
        gt,
        ValidityMask {
            width: 8,
            height: 8,
            data: mask,
        },
    )
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Render two nearby frames of a random corridor walk and warp the source
/// into the target with the true depth and relative pose. Returns the mean
/// absolute colour error over in-bounds pixels with ground truth.
pub fn synthetic_warp_l1(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (160, 64);
    let intr = default_intrinsics(w, h);
    let world = World::Corridor(Corridor {
        texture_seed: seed,
        ..Corridor::default()
    });
    let traj = Trajectory::random(rng.gen_range(5.0..200.0), seed);
    let t = rng.gen_range(0.0..100.0);
    let dt = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let tgt_pose = traj.camera_to_world(t);
    let src_pose = traj.camera_to_world(t + dt);
    let (tgt_img, tgt_depth) = render_frame(&world, &intr, &tgt_pose, 2)?;
    let (src_img, _) = render_frame(&world, &intr, &src_pose, 2)?;
    // Target camera to source camera.
    let rel = Pose::from_matrix(&(src_pose.inverse().to_matrix() * tgt_pose.to_matrix()));
    let dev = Device::Cpu;
    let valid = tgt_depth.validity();
    let depth_filled = DepthMap::new(
        w,
        h,
        tgt_depth.data.iter().map(|&d| if d > 0.0 { d } else { 1000.0 }).collect(),
    )?;
    let (warped, inb) = inverse_warp(
        &src_img.to_tensor(&dev)?,
        &depth_filled.to_tensor(&dev)?,
        &Pose::stack(&[rel], DType::F32, &dev)?,
        &intr,
    )?;
    let diff = (warped - tgt_img.to_tensor(&dev)?)?.abs()?.mean_keepdim(1)?;
    let diff = diff.flatten_all()?.to_vec1::<f32>()?;
    let inb = inb.flatten_all()?.to_vec1::<f32>()?;
    let mut s = 0.0;
    let mut n = 0usize;
    for i in 0..diff.len() {
        if inb[i] > 0.5 && valid.data[i] {
            s += diff[i] as f64;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::INFINITY } else { s / n as f64 })
}
