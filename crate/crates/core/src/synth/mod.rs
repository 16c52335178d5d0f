//! Synthetic scenes standing in for a real dataset and a trained dense
//! regressor: a ray-marched height field supplies depth and ground-truth
//! scene coordinates, and a noise model turns them into predictions with a
//! controlled inlier rate.

mod toy;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RelocError, Result};
use crate::geometry::{CameraIntrinsics, Pose, ScenePoint};
use crate::losses::{CoordinateMap, DepthMap};
use crate::pipeline::Frame;

pub use toy::{
    mean_coordinate_error, train_toy_regressor, CoordLoss, ToyRegressor, ToyRegressorConfig,
    ToyReport,
};

/// Minimum fraction of pixels that must hit the surface.
pub const MIN_VISIBLE_FRACTION: f64 = 0.3;
/// Ground-truth consistency tolerance, meters.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Mean height of the surface.
    pub base_height: f64,
    /// Peak deviation of the surface from `base_height`.
    pub amplitude: f64,
    /// Control points per side of the height grid.
    pub grid: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            min: [-2.0, -2.0, 0.0],
            max: [2.0, 2.0, 2.0],
            base_height: 0.5,
            amplitude: 0.3,
            grid: 6,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.max[a] > self.min[a]) {
                return Err(RelocError::InvalidConfig(format!(
                    "scene box is degenerate along axis {a}"
                )));
            }
        }
        if self.amplitude < 0.0 || self.grid < 2 {
            return Err(RelocError::InvalidConfig(
                "amplitude must be non-negative and grid at least 2".into(),
            ));
        }
        if self.base_height - self.amplitude < self.min[2] || self.base_height + self.amplitude > self.max[2] {
            return Err(RelocError::InvalidConfig(
                "surface does not fit inside the scene box".into(),
            ));
        }
        Ok(())
    }

    pub fn diameter(&self) -> f64 {
        (Vector3::from(self.max) - Vector3::from(self.min)).norm()
    }

    pub fn center(&self) -> ScenePoint {
        ScenePoint::from((Vector3::from(self.max) + Vector3::from(self.min)) / 2.0)
    }
}

/// Smooth height field `z = h(x, y)` over the scene box footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    spec: SceneSpec,
    grid: Vec<f64>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl Scene {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn diameter(&self) -> f64 {
        self.spec.diameter()
    }

    pub fn center(&self) -> ScenePoint {
        self.spec.center()
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.spec.min[0] && x <= self.spec.max[0] && y >= self.spec.min[1] && y <= self.spec.max[1]
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let n = self.spec.grid;
        let cell = |v: f64, axis: usize| {
            let t = ((v - self.spec.min[axis]) / (self.spec.max[axis] - self.spec.min[axis])).clamp(0.0, 1.0)
                * (n - 1) as f64;
            let i = (t.floor() as usize).min(n - 2);
            (i, smoothstep(t - i as f64))
        };
        let (ix, fx) = cell(x, 0);
        let (iy, fy) = cell(y, 1);
        let g = |i: usize, j: usize| self.grid[j * n + i];
        let top = g(ix, iy) * (1.0 - fx) + g(ix + 1, iy) * fx;
        let bottom = g(ix, iy + 1) * (1.0 - fx) + g(ix + 1, iy + 1) * fx;
        self.spec.base_height + self.spec.amplitude * (top * (1.0 - fy) + bottom * fy)
    }

    fn surface_range(&self) -> (f64, f64) {
        (
            self.spec.base_height - self.spec.amplitude,
            self.spec.base_height + self.spec.amplitude,
        )
    }

    /// Uniform sample from the scene box.
    pub fn sample_box(&self, rng: &mut impl Rng) -> ScenePoint {
        ScenePoint::new(
            rng.gen_range(self.spec.min[0]..self.spec.max[0]),
            rng.gen_range(self.spec.min[1]..self.spec.max[1]),
            rng.gen_range(self.spec.min[2]..self.spec.max[2]),
        )
    }

    /// Depth at which the viewing ray `origin + d·direction` first meets the
    /// surface, where `direction` has unit z in the camera frame.
    pub fn intersect(&self, origin: &Vector3<f64>, direction: &Vector3<f64>) -> Option<f64> {
        let step = 1e-3 * self.diameter();
        let (lo, hi) = self.surface_range();
        let above = |d: f64| {
            let p = origin + direction * d;
            if !self.contains_xy(p.x, p.y) {
                return None;
            }
            Some(p.z - self.height(p.x, p.y))
        };
        // Only the slab between the lowest and highest surface point can hold a
        // hit. It is padded by one step so a flat surface still has thickness.
        let (lo, hi) = (lo - step, hi + step);
        let (mut start, end) = if direction.z.abs() < 1e-12 {
            if origin.z < lo || origin.z > hi {
                return None;
            }
            (step, 4.0 * self.diameter() + (origin - self.center().coords).norm())
        } else {
            let a = (hi - origin.z) / direction.z;
            let b = (lo - origin.z) / direction.z;
            (a.min(b).max(step), a.max(b))
        };
        if end <= start {
            return None;
        }
        let mut prev = above(start);
        if prev.map_or(false, |v| v <= 0.0) {
            // started below the surface (camera inside terrain)
            return None;
        }
        while start < end {
            let next = (start + step).min(end);
            let cur = above(next);
            if let (Some(p), Some(c)) = (prev, cur) {
                if p > 0.0 && c <= 0.0 {
                    return Some(self.bisect(origin, direction, start, next));
                }
            }
            if matches!((prev, cur), (None, Some(c)) if c <= 0.0) {
                // entered the footprint below the surface: the side wall
                return None;
            }
            prev = cur;
            start = next;
        }
        None
    }

    fn bisect(&self, origin: &Vector3<f64>, direction: &Vector3<f64>, mut a: f64, mut b: f64) -> f64 {
        let tol = 1e-6 / direction.norm();
        let f = |d: f64| {
            let p = origin + direction * d;
            p.z - self.height(p.x, p.y)
        };
        while b - a > tol {
            let m = 0.5 * (a + b);
            if f(m) > 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = (0..spec.grid * spec.grid)
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    Ok(Scene { spec: *spec, grid })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub inlier_prob: f64,
    pub inlier_sigma: f64,
    pub missing_depth_prob: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            inlier_prob: 0.08,
            inlier_sigma: 0.02,
            missing_depth_prob: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn noise_free() -> Self {
        NoiseSpec {
            inlier_prob: 1.0,
            inlier_sigma: 0.0,
            missing_depth_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.inlier_prob) || !prob(self.missing_depth_prob) || !(self.inlier_sigma >= 0.0) {
            return Err(RelocError::InvalidConfig(
                "noise probabilities must lie in [0, 1] and sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One rendered view: depth, ground-truth and predicted coordinate maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub depth: DepthMap,
    pub ground_truth: CoordinateMap,
    pub predicted: CoordinateMap,
}

impl SyntheticFrame {
    /// Pixel indices usable as correspondences: valid depth, ground truth
    /// and prediction.
    pub fn correspondence_pixels(&self) -> Vec<usize> {
        (0..self.depth.len())
            .filter(|&i| self.depth.is_valid(i) && self.ground_truth.valid[i] && self.predicted.valid[i])
            .collect()
    }

    pub fn to_frame(&self) -> Frame {
        self.to_frame_with(&self.predicted)
    }

    /// Correspondences using `predicted` in place of the stored predictions.
    pub fn to_frame_with(&self, predicted: &CoordinateMap) -> Frame {
        let w = self.depth.width;
        let idx: Vec<usize> = (0..self.depth.len())
            .filter(|&i| self.depth.is_valid(i) && self.ground_truth.valid[i] && predicted.valid[i])
            .collect();
        Frame {
            intrinsics: self.intrinsics,
            pixels: idx.iter().map(|&i| CameraIntrinsics::pixel_center(i % w, i / w)).collect(),
            coords: idx.iter().map(|&i| predicted.coords[i]).collect(),
            depths: Some(idx.iter().map(|&i| self.depth.values[i]).collect()),
            gt_coords: Some(idx.iter().map(|&i| self.ground_truth.coords[i]).collect()),
            gt_pose: Some(self.pose),
        }
    }

    /// Checks that stored ground truth equals the back-projected depth.
    pub fn check_consistency(&self) -> Result<()> {
        let w = self.depth.width;
        for i in 0..self.depth.len() {
            if !self.ground_truth.valid[i] {
                continue;
            }
            let p = CameraIntrinsics::pixel_center(i % w, i / w);
            let x = self
                .pose
                .camera_to_scene(&self.intrinsics.backproject(&p, self.depth.values[i])?);
            let err = (x - self.ground_truth.coords[i]).norm();
            if !(err <= CONSISTENCY_TOLERANCE) {
                return Err(RelocError::InvalidConfig(format!(
                    "pixel {i}: ground truth off by {err:e} m"
                )));
            }
        }
        Ok(())
    }
}

/// Renders `pose` and corrupts the ground truth with the noise model.
pub fn render_frame(
    scene: &Scene,
    pose: &Pose,
    k: &CameraIntrinsics,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<SyntheticFrame> {
    noise.validate()?;
    let hits = trace_depths(scene, pose, k, 1);
    let n = hits.len();
    let visible = hits.iter().filter(|d| d.is_some()).count() as f64 / n as f64;
    if visible < MIN_VISIBLE_FRACTION {
        return Err(RelocError::SceneNotVisible {
            visible,
            required: MIN_VISIBLE_FRACTION,
        });
    }

    let (w, h) = (k.width as usize, k.height as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise.inlier_sigma).expect("sigma validated");
    let mut depth = vec![f64::NAN; n];
    let mut gt = vec![CoordinateMap::sentinel(); n];
    let mut gt_valid = vec![false; n];
    let mut pred = vec![CoordinateMap::sentinel(); n];
    let mut pred_valid = vec![false; n];
    for (i, hit) in hits.iter().enumerate() {
        let Some(d) = *hit else { continue };
        let p = CameraIntrinsics::pixel_center(i % w, i / w);
        let x = pose.camera_to_scene(&k.backproject(&p, d)?);
        let inlier = rng.gen_bool(noise.inlier_prob);
        pred[i] = if inlier {
            x + Vector3::from_fn(|_, _| gauss.sample(&mut rng))
        } else {
            scene.sample_box(&mut rng)
        };
        pred_valid[i] = true;
        if !rng.gen_bool(noise.missing_depth_prob) {
            depth[i] = d;
            gt[i] = x;
            gt_valid[i] = true;
        }
    }
    let frame = SyntheticFrame {
        intrinsics: *k,
        pose: *pose,
        depth: DepthMap::new(w, h, depth)?,
        ground_truth: CoordinateMap::new(w, h, gt, gt_valid)?,
        predicted: CoordinateMap::new(w, h, pred, pred_valid)?,
    };
    frame.check_consistency()?;
    Ok(frame)
}

/// Surface depth per pixel (row-major); `stride > 1` traces a sparse subset
/// and leaves the rest `None`.
fn trace_depths(scene: &Scene, pose: &Pose, k: &CameraIntrinsics, stride: usize) -> Vec<Option<f64>> {
    let (w, h) = (k.width as usize, k.height as usize);
    let origin = *pose.translation();
    let mut out = vec![None; w * h];
    for row in (0..h).step_by(stride) {
        for col in (0..w).step_by(stride) {
            let dir = pose.rotation() * k.ray(&CameraIntrinsics::pixel_center(col, row));
            out[row * w + col] = scene.intersect(&origin, &dir);
        }
    }
    out
}

fn visible_fraction(scene: &Scene, pose: &Pose, k: &CameraIntrinsics, stride: usize) -> f64 {
    let hits = trace_depths(scene, pose, k, stride);
    let (w, h) = (k.width as usize, k.height as usize);
    let traced = w.div_ceil(stride) * h.div_ceil(stride);
    hits.iter().filter(|d| d.is_some()).count() as f64 / traced as f64
}

/// Camera at `eye` looking at `target`, image y axis pointing down in the world.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<Pose> {
    let forward = (target - eye).normalize();
    let right = forward.cross(&Vector3::z());
    if right.norm() < 1e-9 {
        return Err(RelocError::InvalidPose("viewing direction parallel to the up axis".into()));
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    Pose::new(Matrix3::from_columns(&[right, down, forward]), *eye)
}

/// Circular orbit above the scene, every pose looking at a jittered point
/// near the scene centre.
pub fn generate_trajectory(scene: &Scene, k: &CameraIntrinsics, n_frames: usize, seed: u64) -> Result<Vec<Pose>> {
    if n_frames == 0 {
        return Err(RelocError::InvalidConfig("trajectory needs at least one frame".into()));
    }
    let spec = scene.spec();
    let center = scene.center();
    let half_x = 0.5 * (spec.max[0] - spec.min[0]);
    let half_y = 0.5 * (spec.max[1] - spec.min[1]);
    let radius = 0.3 * half_x.min(half_y);
    let height = spec.max[2] + 0.25 * (spec.max[2] - spec.min[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut poses = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let angle = phase + std::f64::consts::TAU * i as f64 / n_frames as f64;
        let mut accepted = None;
        for _ in 0..32 {
            let eye = Vector3::new(
                center.x + radius * angle.cos() + rng.gen_range(-0.05..0.05) * half_x,
                center.y + radius * angle.sin() + rng.gen_range(-0.05..0.05) * half_y,
                height + rng.gen_range(-0.05..0.05) * (spec.max[2] - spec.min[2]),
            );
            let target = Vector3::new(
                center.x + rng.gen_range(-0.1..0.1) * half_x,
                center.y + rng.gen_range(-0.1..0.1) * half_y,
                spec.base_height,
            );
            let pose = look_at(&eye, &target)?;
            if visible_fraction(scene, &pose, k, 4) >= MIN_VISIBLE_FRACTION + 0.1 {
                accepted = Some(pose);
                break;
            }
        }
        poses.push(accepted.ok_or(RelocError::SceneNotVisible {
            visible: 0.0,
            required: MIN_VISIBLE_FRACTION,
        })?);
    }
    Ok(poses)
}

/// Intrinsics of the default synthetic camera (160×120 px, about 56° wide).
///
/// Smaller images hold too few inliers for refinement: at 8% inliers the
/// accumulated support of `n_best·(refine_iters + 1)` points would exhaust
/// them and fill up with outliers.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(150.0, 150.0, 80.0, 60.0, 160, 120).expect("valid constants")
}

/// Renders one frame per pose with per-frame seeds derived from `seed`.
pub fn render_suite(
    scene: &Scene,
    poses: &[Pose],
    k: &CameraIntrinsics,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Vec<SyntheticFrame>> {
    use rayon::prelude::*;
    poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| render_frame(scene, pose, k, noise, frame_seed(seed, i)))
        .collect()
}

pub fn frame_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::inlier_fraction;
    use crate::solvers::{kabsch, Match3D3D};
    use crate::geometry::{rotation_error_deg, translation_error_m};

    #[test]
    fn flat_scene_when_amplitude_zero() {
        let scene = generate_scene(&SceneSpec {
            amplitude: 0.0,
            ..SceneSpec::default()
        })
        .unwrap();
        for i in 0..50 {
            let x = -2.0 + 0.08 * i as f64;
            assert_eq!(scene.height(x, -x * 0.5), 0.5);
        }
    }

    #[test]
    fn flat_scene_is_visible_and_hit_at_its_height() {
        let scene = generate_scene(&SceneSpec {
            amplitude: 0.0,
            ..SceneSpec::default()
        })
        .unwrap();
        let d = scene.intersect(&Vector3::new(0.1, 0.2, 2.5), &-Vector3::z()).unwrap();
        assert!((d - 2.0).abs() < 1e-6);
        let k = default_intrinsics();
        let pose = generate_trajectory(&scene, &k, 1, 0).unwrap()[0];
        assert!(render_frame(&scene, &pose, &k, &NoiseSpec::noise_free(), 1).is_ok());
    }

    #[test]
    fn surface_stays_inside_box() {
        let spec = SceneSpec {
            amplitude: 0.5,
            base_height: 0.5,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        for i in 0..=200 {
            for j in 0..=200 {
                let x = -2.0 + 4.0 * i as f64 / 200.0;
                let y = -2.0 + 4.0 * j as f64 / 200.0;
                let z = scene.height(x, y);
                assert!(z >= spec.min[2] && z <= spec.max[2]);
            }
        }
    }

    #[test]
    fn scene_is_seed_deterministic() {
        let a = generate_scene(&SceneSpec::default()).unwrap();
        assert_eq!(a, generate_scene(&SceneSpec::default()).unwrap());
        let b = generate_scene(&SceneSpec {
            seed: 1,
            ..SceneSpec::default()
        })
        .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn invalid_specs() {
        let bad_box = SceneSpec {
            max: [2.0, -2.0, 2.0],
            ..SceneSpec::default()
        };
        assert!(generate_scene(&bad_box).is_err());
        let too_tall = SceneSpec {
            amplitude: 1.0,
            ..SceneSpec::default()
        };
        assert!(generate_scene(&too_tall).is_err());
    }

    #[test]
    fn noise_free_frame_gives_exact_kabsch() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let k = default_intrinsics();
        let poses = generate_trajectory(&scene, &k, 3, 1).unwrap();
        let frame = render_frame(&scene, &poses[1], &k, &NoiseSpec::noise_free(), 5).unwrap();
        assert_eq!(frame.predicted.coords, frame.ground_truth.coords);
        let f = frame.to_frame();
        let matches: Vec<Match3D3D> = (0..f.len())
            .step_by(37)
            .map(|i| Match3D3D {
                camera_point: k.backproject(&f.pixels[i], f.depths.as_ref().unwrap()[i]).unwrap(),
                scene_point: f.coords[i],
            })
            .collect();
        let est = kabsch(&matches).unwrap();
        assert!(rotation_error_deg(&est, &poses[1]) < 1e-6);
        assert!(translation_error_m(&est, &poses[1]) < 1e-9);
    }

    #[test]
    fn calibrated_inlier_rate() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let k = default_intrinsics();
        let poses = generate_trajectory(&scene, &k, 4, 2).unwrap();
        let frames = render_suite(&scene, &poses, &k, &NoiseSpec::default(), 3).unwrap();
        let (mut pred, mut gt) = (vec![], vec![]);
        for f in &frames {
            let fr = f.to_frame();
            pred.extend(fr.coords);
            gt.extend(fr.gt_coords.unwrap());
        }
        assert!(pred.len() >= 10_000);
        let frac = inlier_fraction(&pred, &gt, 0.1).unwrap();
        assert!((0.06..=0.10).contains(&frac), "{frac}");
        let sd = (0.08f64 * 0.92 / pred.len() as f64).sqrt();
        assert!((frac - 0.08).abs() <= 3.0 * sd + 1e-3, "{frac}");
    }

    #[test]
    fn missing_depth_masks_pixels() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let k = default_intrinsics();
        let pose = generate_trajectory(&scene, &k, 1, 0).unwrap()[0];
        let noise = NoiseSpec {
            missing_depth_prob: 0.3,
            ..NoiseSpec::default()
        };
        let frame = render_frame(&scene, &pose, &k, &noise, 1).unwrap();
        let missing = (0..frame.depth.len())
            .filter(|&i| frame.predicted.valid[i] && !frame.depth.is_valid(i))
            .count() as f64;
        let hits = frame.predicted.valid_count() as f64;
        assert!((missing / hits - 0.3).abs() < 0.05);
        for i in 0..frame.depth.len() {
            assert_eq!(frame.depth.is_valid(i), frame.ground_truth.valid[i]);
        }
    }

    #[test]
    fn trajectory_poses_are_visible_and_deterministic() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let k = default_intrinsics();
        let one = generate_trajectory(&scene, &k, 1, 9).unwrap();
        assert_eq!(one.len(), 1);
        let poses = generate_trajectory(&scene, &k, 12, 9).unwrap();
        assert_eq!(poses, generate_trajectory(&scene, &k, 12, 9).unwrap());
        for p in &poses {
            render_frame(&scene, p, &k, &NoiseSpec::default(), 0).unwrap();
        }
    }

    #[test]
    fn looking_away_is_not_visible() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let k = default_intrinsics();
        let pose = look_at(&Vector3::new(0.0, 0.0, 3.0), &Vector3::new(10.0, 0.0, 3.5)).unwrap();
        assert!(matches!(
            render_frame(&scene, &pose, &k, &NoiseSpec::default(), 0),
            Err(RelocError::SceneNotVisible { .. })
        ));
    }
}
