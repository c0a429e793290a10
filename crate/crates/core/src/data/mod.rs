//! Frame sequences: synthetic generation, KITTI-layout storage and
//! sub-sequence splitting.

pub mod kitti;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::maps::{DepthMap, Image};

pub use kitti::{
    decode_depth_png, encode_depth_png, load_kitti_index, load_sequence, read_depth_png, read_image, write_depth_png,
    write_image, write_sequence, write_split, DatasetIndex, IndexedFrame, IndexedSequence, Split,
};
pub use synthetic::{
    default_intrinsics, generate_synthetic, render_frame, Corridor, PlaneWorld, SyntheticScene, Trajectory, World,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    /// Ground-truth depth, when available.
    pub depth: Option<DepthMap>,
    pub camera_to_world: Option<Pose>,
}

/// Consecutive frames from one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.frames.iter().all(|f| f.depth.is_some())
    }

    /// Transform from the camera of frame `from` to the camera of frame `to`.
    pub fn relative_pose(&self, from: usize, to: usize) -> Result<Pose> {
        let get = |i: usize| {
            self.frames
                .get(i)
                .and_then(|f| f.camera_to_world.clone())
                .ok_or_else(|| Error::Config(format!("sequence {} has no pose for frame {i}", self.id)))
        };
        let a = get(from)?;
        let b = get(to)?;
        Ok(Pose::from_matrix(&(b.inverse().to_matrix() * a.to_matrix())))
    }

    /// Frames `start .. start + len` as a new sequence.
    pub fn slice(&self, start: usize, len: usize) -> Sequence {
        Sequence {
            id: format!("{}[{start}..{}]", self.id, start + len),
            intrinsics: self.intrinsics.clone(),
            frames: self.frames[start..start + len].to_vec(),
        }
    }
}

/// A contiguous window of one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SubSequence {
    pub sequence: usize,
    pub start: usize,
    pub len: usize,
}

/// Minimum window length: every frame needs a chance at both neighbours.
pub const MIN_SUBSEQ_LEN: usize = 3;

/// Cut each sequence into non-overlapping windows of `subseq_length`.
/// A trailing remainder is kept when it has at least three frames. The
/// windows are shuffled with `seed`.
pub fn split_subsequences(lengths: &[usize], subseq_length: usize, seed: u64) -> Result<Vec<SubSequence>> {
    if subseq_length < MIN_SUBSEQ_LEN {
        return Err(Error::Config(format!(
            "sub-sequence length {subseq_length} is below {MIN_SUBSEQ_LEN}"
        )));
    }
    let mut out = Vec::new();
    for (s, &n) in lengths.iter().enumerate() {
        let mut start = 0;
        while start < n {
            let len = subseq_length.min(n - start);
            if len >= MIN_SUBSEQ_LEN {
                out.push(SubSequence { sequence: s, start, len });
            }
            start += subseq_length;
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}
