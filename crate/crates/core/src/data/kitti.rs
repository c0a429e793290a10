//! KITTI raw directory layout: calibration, frames, 16-bit depth PNGs,
//! poses and split files.
//!
//! ```text
//! root/<date>/calib_cam_to_cam.txt
//! root/<date>/<drive>/image_02/data/0000000000.png
//! root/<date>/<drive>/proj_depth/groundtruth/image_02/0000000000.png
//! root/<date>/<drive>/poses.txt             (optional, 3x4 camera-to-world rows)
//! root/splits/<split>_files.txt             ("<date>/<drive> <index> l" per line)
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{ImageBuffer, Luma, RgbImage};
use nalgebra::Matrix4;

use super::{Frame, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::maps::{DepthMap, Image};

/// Depth PNGs store `round(256 * meters)`.
pub const DEPTH_PNG_SCALE: f64 = 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}_files.txt", self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexedFrame {
    pub index: usize,
    pub image: PathBuf,
    pub depth: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexedSequence {
    /// Drive folder, suffixed with `#k` when gaps split a drive.
    pub id: String,
    pub folder: String,
    pub intrinsics: Intrinsics,
    pub frames: Vec<IndexedFrame>,
    pub poses: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub split: Option<Split>,
    pub sequences: Vec<IndexedSequence>,
    /// Split entries whose image was not found.
    pub missing: Vec<String>,
}

impl DatasetIndex {
    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }
}

fn camera_dir(side: &str) -> Result<&'static str> {
    match side {
        "l" | "2" => Ok("image_02"),
        "r" | "3" => Ok("image_03"),
        other => Err(Error::Config(format!("unknown camera side `{other}`"))),
    }
}

pub fn image_path(root: &Path, folder: &str, camera: &str, index: usize) -> PathBuf {
    root.join(folder).join(camera).join("data").join(format!("{index:010}.png"))
}

pub fn depth_path(root: &Path, folder: &str, camera: &str, index: usize) -> PathBuf {
    root.join(folder)
        .join("proj_depth")
        .join("groundtruth")
        .join(camera)
        .join(format!("{index:010}.png"))
}

fn date_of(folder: &str) -> &str {
    folder.split('/').next().unwrap_or(folder)
}

/// Parse `P_rect_0X` and `S_rect_0X` from a KITTI calibration file.
pub fn parse_calibration(path: &Path, camera: &str) -> Result<Intrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cam = &camera[camera.len() - 2..];
    let mut values: HashMap<&str, Vec<f64>> = HashMap::new();
    for line in text.lines() {
        if let Some((key, rest)) = line.split_once(':') {
            let nums: Vec<f64> = rest.split_whitespace().filter_map(|v| v.parse().ok()).collect();
            values.insert(key.trim(), nums);
        }
    }
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let p = values
        .get(format!("P_rect_{cam}").as_str())
        .filter(|v| v.len() == 12)
        .ok_or_else(|| bad(format!("missing P_rect_{cam}")))?;
    let s = values
        .get(format!("S_rect_{cam}").as_str())
        .filter(|v| v.len() == 2)
        .ok_or_else(|| bad(format!("missing S_rect_{cam}")))?;
    Intrinsics::new(p[0], p[5], p[2], p[6], s[0].round() as usize, s[1].round() as usize)
}

pub fn write_calibration(path: &Path, intr: &Intrinsics) -> Result<()> {
    let p = [
        intr.fx, 0.0, intr.cx, 0.0, 0.0, intr.fy, intr.cy, 0.0, 0.0, 0.0, 1.0, 0.0,
    ];
    let fmt_row = |v: &[f64]| v.iter().map(|x| format!("{x:.12e}")).collect::<Vec<_>>().join(" ");
    let size = [intr.width as f64, intr.height as f64];
    let text = format!(
        "S_rect_02: {}\nP_rect_02: {}\n",
        fmt_row(&size),
        fmt_row(&p)
    );
    write_file(path, text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a split file and resolve it against `root`. Entries are grouped by
/// drive in order of first appearance and sorted by frame index; gaps in
/// the index start a new sequence. Missing images are logged and skipped.
pub fn load_kitti_index(root: &Path, split_file: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(split_file).map_err(|e| Error::io(split_file, e))?;
    let split = split_file
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.split('_').next())
        .and_then(|s| s.parse().ok());
    let mut order: Vec<(String, &'static str)> = Vec::new();
    let mut entries: HashMap<(String, &'static str), Vec<usize>> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        let bad = || Error::Format {
            path: split_file.to_path_buf(),
            message: format!("line {}: expected `<folder> <index> [l|r]`", lineno + 1),
        };
        if parts.len() < 2 {
            return Err(bad());
        }
        let index: usize = parts[1].parse().map_err(|_| bad())?;
        let camera = camera_dir(parts.get(2).copied().unwrap_or("l"))?;
        let key = (parts[0].trim_end_matches('/').to_string(), camera);
        if !entries.contains_key(&key) {
            order.push(key.clone());
        }
        entries.entry(key).or_default().push(index);
    }

    let mut calib_cache: HashMap<(String, &'static str), Intrinsics> = HashMap::new();
    let mut sequences = Vec::new();
    let mut missing = Vec::new();
    for key in order {
        let (folder, camera) = (&key.0, key.1);
        let date = date_of(folder).to_string();
        let intrinsics = match calib_cache.get(&(date.clone(), camera)) {
            Some(k) => k.clone(),
            None => {
                let k = parse_calibration(&root.join(&date).join("calib_cam_to_cam.txt"), camera)?;
                calib_cache.insert((date.clone(), camera), k.clone());
                k
            }
        };
        let mut idx = entries.remove(&key).unwrap_or_default();
        idx.sort_unstable();
        idx.dedup();
        let poses = Some(root.join(folder).join("poses.txt")).filter(|p| p.is_file());
        let mut runs: Vec<Vec<IndexedFrame>> = Vec::new();
        let mut last: Option<usize> = None;
        for i in idx {
            let image = image_path(root, folder, camera, i);
            if !image.is_file() {
                log::warn!("skipping {folder} {i}: {} not found", image.display());
                missing.push(format!("{folder} {i}"));
                last = None;
                continue;
            }
            let depth = Some(depth_path(root, folder, camera, i)).filter(|p| p.is_file());
            if last.map_or(true, |l| i != l + 1) {
                runs.push(Vec::new());
            }
            if let Some(run) = runs.last_mut() {
                run.push(IndexedFrame { index: i, image, depth });
            }
            last = Some(i);
        }
        let many = runs.len() > 1;
        for (k, frames) in runs.into_iter().enumerate() {
            sequences.push(IndexedSequence {
                id: if many { format!("{folder}#{k}") } else { folder.clone() },
                folder: folder.clone(),
                intrinsics: intrinsics.clone(),
                frames,
                poses: poses.clone(),
            });
        }
    }
    Ok(DatasetIndex {
        split,
        sequences,
        missing,
    })
}

/// RGB PNG to an [`Image`], resized with a triangle filter when needed.
pub fn read_image(path: &Path, width: usize, height: usize) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let img = if (img.width() as usize, img.height() as usize) == (width, height) {
        img
    } else {
        image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
    };
    let n = width * height;
    let mut data = vec![0f32; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    Image::new(width, height, data)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let n = image.width * image.height;
    let mut raw = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            raw.push((image.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let buf = RgbImage::from_raw(image.width as u32, image.height as u32, raw)
        .ok_or_else(|| Error::shape("image buffer size"))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path)?;
    Ok(())
}

/// Quantize metric depth to 16-bit values; invalid or unrepresentable depth becomes 0.
pub fn encode_depth_png(depth: &DepthMap) -> Vec<u16> {
    depth
        .data
        .iter()
        .map(|&d| {
            let v = (d as f64 * DEPTH_PNG_SCALE).round();
            if d > 0.0 && v >= 1.0 && v <= u16::MAX as f64 {
                v as u16
            } else {
                0
            }
        })
        .collect()
}

pub fn decode_depth_png(values: &[u16], width: usize, height: usize) -> Result<DepthMap> {
    DepthMap::new(
        width,
        height,
        values.iter().map(|&v| (v as f64 / DEPTH_PNG_SCALE) as f32).collect(),
    )
}

pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, encode_depth_png(depth))
            .ok_or_else(|| Error::shape("depth buffer size"))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path)?;
    Ok(())
}

/// 16-bit depth PNG, resized by nearest neighbour when needed.
pub fn read_depth_png(path: &Path, width: usize, height: usize) -> Result<DepthMap> {
    let img = image::open(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .into_luma16();
    let (w0, h0) = (img.width() as usize, img.height() as usize);
    let src = decode_depth_png(img.as_raw(), w0, h0)?;
    if (w0, h0) == (width, height) {
        return Ok(src);
    }
    let mut out = DepthMap::zeros(width, height);
    for y in 0..height {
        let sy = ((y as f64 + 0.5) * h0 as f64 / height as f64) as usize;
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * w0 as f64 / width as f64) as usize;
            out.data[y * width + x] = src.get(sx.min(w0 - 1), sy.min(h0 - 1));
        }
    }
    Ok(out)
}

fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Vec<f64> = line.split_whitespace().filter_map(|x| x.parse().ok()).collect();
        if v.len() != 12 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: expected 12 values", k + 1),
            });
        }
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = v[r * 4 + c];
            }
        }
        out.push(Pose::from_matrix(&m));
    }
    Ok(out)
}

fn format_pose(p: &Pose) -> String {
    let m = p.to_matrix();
    let mut vals = Vec::with_capacity(12);
    for r in 0..3 {
        for c in 0..4 {
            vals.push(format!("{:.12e}", m[(r, c)]));
        }
    }
    vals.join(" ")
}

/// Load an indexed sequence at `width x height`, rescaling the intrinsics.
pub fn load_sequence(seq: &IndexedSequence, width: usize, height: usize) -> Result<Sequence> {
    let poses = match &seq.poses {
        Some(p) => Some(read_poses(p)?),
        None => None,
    };
    let mut frames = Vec::with_capacity(seq.frames.len());
    for f in &seq.frames {
        let image = read_image(&f.image, width, height)?;
        let depth = match &f.depth {
            Some(p) => Some(read_depth_png(p, width, height)?),
            None => None,
        };
        let camera_to_world = poses.as_ref().and_then(|p| p.get(f.index).cloned());
        frames.push(Frame {
            image,
            depth,
            camera_to_world,
        });
    }
    Ok(Sequence {
        id: seq.id.clone(),
        intrinsics: seq.intrinsics.resized(width, height),
        frames,
    })
}

/// Store a sequence as drive `folder` (`<date>/<drive>`), frames numbered from 0.
pub fn write_sequence(root: &Path, folder: &str, seq: &Sequence) -> Result<()> {
    let camera = "image_02";
    write_calibration(&root.join(date_of(folder)).join("calib_cam_to_cam.txt"), &seq.intrinsics)?;
    let mut poses = String::new();
    for (i, f) in seq.frames.iter().enumerate() {
        write_image(&image_path(root, folder, camera, i), &f.image)?;
        if let Some(d) = &f.depth {
            write_depth_png(&depth_path(root, folder, camera, i), d)?;
        }
        if let Some(p) = &f.camera_to_world {
            poses.push_str(&format_pose(p));
            poses.push('\n');
        }
    }
    if !poses.is_empty() {
        write_file(&root.join(folder).join("poses.txt"), poses.as_bytes())?;
    }
    Ok(())
}

/// Write `root/splits/<split>_files.txt` listing every frame of the given drives.
pub fn write_split(root: &Path, split: Split, drives: &[(String, usize)]) -> Result<PathBuf> {
    let mut text = String::new();
    for (folder, n) in drives {
        for i in 0..*n {
            text.push_str(&format!("{folder} {i} l\n"));
        }
    }
    let path = root.join("splits").join(split.file_name());
    write_file(&path, text.as_bytes())?;
    Ok(path)
}
