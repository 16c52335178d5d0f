//! On-disk dataset layout.
//!
//! A dataset directory holds a shared `intrinsics.json` and, per frame,
//! `frame-NNNNNN.depth.bin`, `frame-NNNNNN.pose.txt` and optionally
//! `frame-NNNNNN.coords.bin` (predicted coordinates) and
//! `frame-NNNNNN.gtcoords.bin`. Binary maps start with the magic `RLDM`,
//! then little-endian `u32` width and height, then row-major little-endian
//! `f32` values (one channel for depth, three interleaved for coordinates).
//! NaN marks a missing value. Pose files hold the 4×4 camera-to-world matrix
//! row by row.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{RelocError, Result};
use crate::geometry::{CameraIntrinsics, Pose, ScenePoint};
use crate::losses::{CoordinateMap, DepthMap};
use crate::synth::SyntheticFrame;

pub const MAP_MAGIC: &[u8; 4] = b"RLDM";
pub const INTRINSICS_FILE: &str = "intrinsics.json";
const HEADER_LEN: usize = 12;

/// Direction of the matrices stored in pose files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseConvention {
    #[default]
    CameraToWorld,
    WorldToCamera,
}

pub fn frame_stem(index: usize) -> String {
    format!("frame-{index:06}")
}

fn map_bytes(width: usize, height: usize, channels: usize, values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * width * height * channels);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn parse_map(path: &Path, bytes: &[u8], channels: usize) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(RelocError::format(path, "truncated header"));
    }
    if &bytes[..4] != MAP_MAGIC {
        return Err(RelocError::format(path, "bad magic, expected RLDM"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = HEADER_LEN + 4 * width * height * channels;
    if bytes.len() != expected {
        return Err(RelocError::format(
            path,
            format!(
                "expected {expected} bytes for a {width}x{height}x{channels} map, found {}",
                bytes.len()
            ),
        ));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((width, height, values))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| RelocError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| RelocError::io(path, e))
}

pub fn depth_to_bytes(depth: &DepthMap) -> Vec<u8> {
    map_bytes(
        depth.width,
        depth.height,
        1,
        (0..depth.len()).map(|i| if depth.is_valid(i) { depth.values[i] } else { f64::NAN }),
    )
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write_bytes(path, &depth_to_bytes(depth))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let (w, h, values) = parse_map(path, &read_bytes(path)?, 1)?;
    if values.iter().any(|v| !v.is_nan() && !(*v > 0.0 && v.is_finite())) {
        return Err(RelocError::format(path, "depth values must be positive or NaN"));
    }
    DepthMap::new(w, h, values).map_err(|e| RelocError::format(path, e.to_string()))
}

pub fn coords_to_bytes(map: &CoordinateMap) -> Vec<u8> {
    map_bytes(
        map.width,
        map.height,
        3,
        map.coords
            .iter()
            .zip(&map.valid)
            .flat_map(|(p, &ok)| {
                let p = if ok { *p } else { CoordinateMap::sentinel() };
                [p.x, p.y, p.z]
            }),
    )
}

pub fn write_coords(path: &Path, map: &CoordinateMap) -> Result<()> {
    write_bytes(path, &coords_to_bytes(map))
}

pub fn read_coords(path: &Path) -> Result<CoordinateMap> {
    let (w, h, values) = parse_map(path, &read_bytes(path)?, 3)?;
    let coords = values
        .chunks_exact(3)
        .map(|c| ScenePoint::new(c[0], c[1], c[2]))
        .collect();
    CoordinateMap::from_coords(w, h, coords).map_err(|e| RelocError::format(path, e.to_string()))
}

pub fn pose_to_text(pose: &Pose) -> String {
    let m = pose.to_matrix();
    let mut out = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_pose(path: &Path, pose: &Pose) -> Result<()> {
    write_bytes(path, pose_to_text(pose).as_bytes())
}

pub fn read_pose(path: &Path, convention: PoseConvention) -> Result<Pose> {
    let text = fs::read_to_string(path).map_err(|e| RelocError::io(path, e))?;
    let values = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| RelocError::format(path, format!("unparsable number: {e}")))?;
    if values.len() != 16 {
        return Err(RelocError::format(
            path,
            format!("expected 16 numbers, found {}", values.len()),
        ));
    }
    let m = nalgebra::Matrix4::from_row_slice(&values);
    let pose = Pose::from_matrix(&m).map_err(|e| RelocError::format(path, e.to_string()))?;
    Ok(match convention {
        PoseConvention::CameraToWorld => pose,
        PoseConvention::WorldToCamera => pose.inverse(),
    })
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let text = serde_json::to_string_pretty(k).expect("plain data serializes");
    write_bytes(path, (text + "\n").as_bytes())
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| RelocError::io(path, e))?;
    let k: CameraIntrinsics =
        serde_json::from_str(&text).map_err(|e| RelocError::format(path, e.to_string()))?;
    k.validate().map_err(|e| RelocError::format(path, e.to_string()))?;
    Ok(k)
}

/// Paths of the files belonging to frame `index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePaths {
    pub depth: PathBuf,
    pub pose: PathBuf,
    pub coords: PathBuf,
    pub gt_coords: PathBuf,
}

impl FramePaths {
    pub fn new(dir: &Path, index: usize) -> Self {
        let stem = frame_stem(index);
        FramePaths {
            depth: dir.join(format!("{stem}.depth.bin")),
            pose: dir.join(format!("{stem}.pose.txt")),
            coords: dir.join(format!("{stem}.coords.bin")),
            gt_coords: dir.join(format!("{stem}.gtcoords.bin")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    pub depth: DepthMap,
    pub pose: Pose,
    pub predicted: Option<CoordinateMap>,
    pub ground_truth: Option<CoordinateMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<DatasetFrame>,
}

/// Writes intrinsics and, per frame, depth, pose, predicted and
/// ground-truth coordinates.
pub fn write_dataset(dir: &Path, frames: &[SyntheticFrame]) -> Result<()> {
    let first = frames.first().ok_or(RelocError::EmptyInput)?;
    fs::create_dir_all(dir).map_err(|e| RelocError::io(dir, e))?;
    write_intrinsics(&dir.join(INTRINSICS_FILE), &first.intrinsics)?;
    for (i, f) in frames.iter().enumerate() {
        let paths = FramePaths::new(dir, i);
        write_depth(&paths.depth, &f.depth)?;
        write_pose(&paths.pose, &f.pose)?;
        write_coords(&paths.coords, &f.predicted)?;
        write_coords(&paths.gt_coords, &f.ground_truth)?;
    }
    Ok(())
}

/// Writes a loaded dataset back in canonical form.
pub fn write_loaded(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| RelocError::io(dir, e))?;
    write_intrinsics(&dir.join(INTRINSICS_FILE), &dataset.intrinsics)?;
    for (i, f) in dataset.frames.iter().enumerate() {
        let paths = FramePaths::new(dir, i);
        write_depth(&paths.depth, &f.depth)?;
        write_pose(&paths.pose, &f.pose)?;
        if let Some(p) = &f.predicted {
            write_coords(&paths.coords, p)?;
        }
        if let Some(g) = &f.ground_truth {
            write_coords(&paths.gt_coords, g)?;
        }
    }
    Ok(())
}

fn frame_count(dir: &Path) -> Result<usize> {
    let mut n = 0;
    while FramePaths::new(dir, n).depth.exists() {
        n += 1;
    }
    let entries = fs::read_dir(dir).map_err(|e| RelocError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| RelocError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == INTRINSICS_FILE {
            continue;
        }
        let known = name
            .strip_prefix("frame-")
            .and_then(|rest| rest.split_once('.'))
            .filter(|(idx, ext)| {
                idx.len() == 6
                    && idx.parse::<usize>().map_or(false, |i| i < n)
                    && matches!(*ext, "depth.bin" | "pose.txt" | "coords.bin" | "gtcoords.bin")
            })
            .is_some();
        if !known {
            return Err(RelocError::format(entry.path(), "unexpected file in dataset"));
        }
    }
    if n == 0 {
        return Err(RelocError::format(dir, "no frame-000000.depth.bin found"));
    }
    Ok(n)
}

fn check_dims(path: &Path, k: &CameraIntrinsics, width: usize, height: usize) -> Result<()> {
    if width != k.width as usize || height != k.height as usize {
        return Err(RelocError::format(
            path,
            format!("map is {width}x{height}, intrinsics say {}x{}", k.width, k.height),
        ));
    }
    Ok(())
}

pub fn read_dataset(dir: &Path, convention: PoseConvention) -> Result<Dataset> {
    let intrinsics = read_intrinsics(&dir.join(INTRINSICS_FILE))?;
    let n = frame_count(dir)?;
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let paths = FramePaths::new(dir, i);
        let depth = read_depth(&paths.depth)?;
        check_dims(&paths.depth, &intrinsics, depth.width, depth.height)?;
        let pose = read_pose(&paths.pose, convention)?;
        let optional = |path: &Path| -> Result<Option<CoordinateMap>> {
            if !path.exists() {
                return Ok(None);
            }
            let map = read_coords(path)?;
            check_dims(path, &intrinsics, map.width, map.height)?;
            Ok(Some(map))
        };
        frames.push(DatasetFrame {
            depth,
            pose,
            predicted: optional(&paths.coords)?,
            ground_truth: optional(&paths.gt_coords)?,
        });
    }
    Ok(Dataset { intrinsics, frames })
}

impl DatasetFrame {
    /// Ground truth recomputed from depth and pose, which is exact for the
    /// stored values; the `gtcoords` file only serves as a cross-check.
    pub fn to_synthetic(&self, k: &CameraIntrinsics) -> Result<SyntheticFrame> {
        let predicted = self.predicted.clone().ok_or_else(|| {
            RelocError::InvalidConfig("frame has no predicted coordinate map".into())
        })?;
        let w = self.depth.width;
        let mut coords = vec![CoordinateMap::sentinel(); self.depth.len()];
        let mut valid = vec![false; self.depth.len()];
        for i in 0..self.depth.len() {
            if self.depth.is_valid(i) {
                let p = CameraIntrinsics::pixel_center(i % w, i / w);
                coords[i] = self.pose.camera_to_scene(&k.backproject(&p, self.depth.values[i])?);
                valid[i] = true;
            }
        }
        let frame = SyntheticFrame {
            intrinsics: *k,
            pose: self.pose,
            depth: self.depth.clone(),
            ground_truth: CoordinateMap::new(w, self.depth.height, coords, valid)?,
            predicted,
        };
        frame.check_consistency()?;
        Ok(frame)
    }
}

impl Dataset {
    pub fn to_synthetic(&self) -> Result<Vec<SyntheticFrame>> {
        self.frames.iter().map(|f| f.to_synthetic(&self.intrinsics)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    /// Largest distance between stored ground truth and the value implied by
    /// depth and pose, in meters.
    pub max_ground_truth_deviation: f64,
}

/// Reads every file and cross-checks stored ground truth against depth and
/// pose. Tolerance covers the `f32` storage of coordinates.
pub fn validate_dataset(dir: &Path) -> Result<ValidationReport> {
    let ds = read_dataset(dir, PoseConvention::CameraToWorld)?;
    let mut worst: f64 = 0.0;
    for (i, f) in ds.frames.iter().enumerate() {
        let paths = FramePaths::new(dir, i);
        let Some(gt) = &f.ground_truth else { continue };
        let w = f.depth.width;
        for j in 0..f.depth.len() {
            if f.depth.is_valid(j) != gt.valid[j] {
                return Err(RelocError::format(&paths.gt_coords, format!("mask disagrees with depth at pixel {j}")));
            }
            if !gt.valid[j] {
                continue;
            }
            let p = CameraIntrinsics::pixel_center(j % w, j / w);
            let x = f.pose.camera_to_scene(&ds.intrinsics.backproject(&p, f.depth.values[j])?);
            let dev = (x - gt.coords[j]).norm();
            let tol = 1e-5 * (1.0 + x.coords.norm());
            if !(dev <= tol) {
                return Err(RelocError::format(
                    &paths.gt_coords,
                    format!("pixel {j} deviates by {dev:e} m from depth and pose"),
                ));
            }
            worst = worst.max(dev);
        }
    }
    Ok(ValidationReport {
        frames: ds.frames.len(),
        width: ds.intrinsics.width,
        height: ds.intrinsics.height,
        max_ground_truth_deviation: worst,
    })
}
