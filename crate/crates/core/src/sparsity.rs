//! Sparse depth input patterns drawn from ground-truth depth.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{DepthMap, SparseDepth, ValidityMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparsePattern {
    /// Uniformly chosen valid pixels.
    Random { count: usize },
    /// Evenly spaced scan lines across the rows that carry depth.
    Lines { num_lines: usize },
    /// Every valid pixel.
    Full,
}

impl SparsePattern {
    pub fn apply(&self, gt: &DepthMap, seed: u64) -> Result<SparseDepth> {
        match *self {
            SparsePattern::Random { count } => Ok(sample_random(gt, count, seed)),
            SparsePattern::Lines { num_lines } => sample_lines(gt, num_lines, seed),
            SparsePattern::Full => Ok(sample_full(gt)),
        }
    }

    /// Short label used in reports, e.g. `rand200` or `line8`.
    pub fn label(&self) -> String {
        match self {
            SparsePattern::Random { count } => format!("rand{count}"),
            SparsePattern::Lines { num_lines } => format!("line{num_lines}"),
            SparsePattern::Full => "full".to_string(),
        }
    }
}

impl fmt::Display for SparsePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for SparsePattern {
    type Err = Error;

    /// Accepts `rand<N>`, `random:<N>`, `line<N>`, `lines:<N>` and `full`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "full" {
            return Ok(SparsePattern::Full);
        }
        let parse = |digits: &str| {
            digits
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad sparse pattern `{s}`")))
        };
        for prefix in ["random:", "rand"] {
            if let Some(rest) = s.strip_prefix(prefix) {
                return Ok(SparsePattern::Random { count: parse(rest)? });
            }
        }
        for prefix in ["lines:", "line"] {
            if let Some(rest) = s.strip_prefix(prefix) {
                return Ok(SparsePattern::Lines { num_lines: parse(rest)? });
            }
        }
        Err(Error::Config(format!(
            "unknown sparse pattern `{s}` (expected rand<N>, line<N> or full)"
        )))
    }
}

/// Deterministic per-frame seed.
pub fn frame_seed(base: u64, sequence: u64, frame: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(base) ^ sequence) ^ frame)
}

fn from_indices(gt: &DepthMap, indices: impl IntoIterator<Item = usize>) -> SparseDepth {
    let mut out = SparseDepth::empty(gt.width, gt.height);
    for i in indices {
        out.depth.data[i] = gt.data[i];
        out.mask.data[i] = true;
    }
    out
}

/// `min(count, valid)` distinct valid pixels chosen uniformly.
pub fn sample_random(gt: &DepthMap, count: usize, seed: u64) -> SparseDepth {
    let valid: Vec<usize> = (0..gt.data.len()).filter(|&i| gt.data[i] > 0.0).collect();
    let k = count.min(valid.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, valid.len(), k);
    from_indices(gt, picked.into_iter().map(|j| valid[j]))
}

/// Valid pixels on `num_lines` rows spaced evenly over the band of rows that
/// carry depth. The seed picks the phase of the first line.
pub fn sample_lines(gt: &DepthMap, num_lines: usize, seed: u64) -> Result<SparseDepth> {
    let rows_with_depth: Vec<usize> = (0..gt.height)
        .filter(|&y| gt.data[y * gt.width..(y + 1) * gt.width].iter().any(|&d| d > 0.0))
        .collect();
    if num_lines == 0 || num_lines > rows_with_depth.len() {
        return Err(Error::Domain(format!(
            "{num_lines} scan lines requested but only {} rows carry depth",
            rows_with_depth.len()
        )));
    }
    let first = rows_with_depth[0];
    let last = *rows_with_depth.last().unwrap_or(&first);
    let stride = (last - first + 1) as f64 / num_lines as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.gen_range(0..stride.floor().max(1.0) as usize) as f64;
    let mut out = SparseDepth::empty(gt.width, gt.height);
    for k in 0..num_lines {
        let y = first + (phase + k as f64 * stride).floor() as usize;
        for x in 0..gt.width {
            let i = y * gt.width + x;
            if gt.data[i] > 0.0 {
                out.depth.data[i] = gt.data[i];
                out.mask.data[i] = true;
            }
        }
    }
    Ok(out)
}

/// The ground truth itself.
pub fn sample_full(gt: &DepthMap) -> SparseDepth {
    SparseDepth {
        depth: gt.clone(),
        mask: gt.validity(),
    }
}

/// Rows that contain at least one selected pixel.
pub fn selected_rows(mask: &ValidityMask) -> Vec<usize> {
    (0..mask.height)
        .filter(|&y| mask.data[y * mask.width..(y + 1) * mask.width].iter().any(|&b| b))
        .collect()
}
