//! Pinhole camera model, rigid camera-to-scene poses and pose error metrics.
//!
//! Poses are stored camera-to-scene: a point `x` in the camera frame maps to
//! `X = R·x + t` in scene coordinates. Pixels are continuous; nothing here
//! rounds to the integer grid.

use nalgebra::{Matrix3, Matrix4, Point2, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{RelocError, Result};

/// A point in the camera frame: `(x, y, d)` with `d` the depth along the optical axis.
pub type CameraPoint = Point3<f64>;
/// A point in scene (world) coordinates, meters.
pub type ScenePoint = Point3<f64>;
/// Continuous image coordinates `(u, v)` in pixels.
pub type Pixel = Point2<f64>;

/// Tolerance used by [`Pose::new`] when checking orthonormality.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Checks the intrinsics invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(RelocError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(RelocError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(RelocError::InvalidIntrinsics(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(RelocError::InvalidIntrinsics(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn project(&self, x: &CameraPoint) -> Result<Pixel> {
        if !(x.z > 0.0) {
            return Err(RelocError::NonPositiveDepth(x.z));
        }
        Ok(Pixel::new(
            self.fx * x.x / x.z + self.cx,
            self.fy * x.y / x.z + self.cy,
        ))
    }

    pub fn backproject(&self, p: &Pixel, depth: f64) -> Result<CameraPoint> {
        if !(depth > 0.0) {
            return Err(RelocError::NonPositiveDepth(depth));
        }
        Ok(CameraPoint::new(
            (p.x - self.cx) * depth / self.fx,
            (p.y - self.cy) * depth / self.fy,
            depth,
        ))
    }

    /// Direction of the viewing ray through `p`, scaled so its z component is 1.
    pub fn ray(&self, p: &Pixel) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    /// Continuous coordinates of the centre of pixel `(col, row)`.
    pub fn pixel_center(col: usize, row: usize) -> Pixel {
        Pixel::new(col as f64 + 0.5, row as f64 + 0.5)
    }
}

/// Rigid camera-to-scene transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose, rejecting rotations that are not proper orthonormal
    /// matrices (`‖RᵀR − I‖∞ > 1e-6` or `det R < 0`).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(RelocError::InvalidPose("non-finite entry".into()));
        }
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if defect > ROTATION_TOLERANCE {
            return Err(RelocError::InvalidPose(format!(
                "rotation is not orthonormal (max deviation {defect:e})"
            )));
        }
        let det = rotation.determinant();
        if det < 0.0 {
            return Err(RelocError::InvalidPose(format!(
                "rotation is a reflection (det {det})"
            )));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis`, followed by `translation`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self::from_rotation(rotation, translation)
    }

    /// Parses a homogeneous 4×4 camera-to-scene matrix.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom
            .iter()
            .zip([0.0, 0.0, 0.0, 1.0])
            .any(|(a, b)| (a - b).abs() > ROTATION_TOLERANCE)
        {
            return Err(RelocError::InvalidPose(format!(
                "bottom row must be 0 0 0 1, got {bottom:?}"
            )));
        }
        Pose::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera position in scene coordinates.
    pub fn center(&self) -> ScenePoint {
        ScenePoint::from(self.translation)
    }

    pub fn camera_to_scene(&self, x: &CameraPoint) -> ScenePoint {
        ScenePoint::from(self.rotation * x.coords + self.translation)
    }

    pub fn scene_to_camera(&self, p: &ScenePoint) -> CameraPoint {
        CameraPoint::from(self.rotation.transpose() * (p.coords - self.translation))
    }
}

pub fn camera_to_scene(pose: &Pose, x: &CameraPoint) -> ScenePoint {
    pose.camera_to_scene(x)
}

pub fn scene_to_camera(pose: &Pose, p: &ScenePoint) -> CameraPoint {
    pose.scene_to_camera(p)
}

pub fn project(k: &CameraIntrinsics, x: &CameraPoint) -> Result<Pixel> {
    k.project(x)
}

pub fn backproject(k: &CameraIntrinsics, p: &Pixel, depth: f64) -> Result<CameraPoint> {
    k.backproject(p, depth)
}

/// Geodesic angle between the two rotations, in degrees, within `[0, 180]`.
///
/// Equal to `acos((tr(RaᵀRb) − 1) / 2)`; evaluated as `atan2(sin, cos)` of the
/// relative rotation so that sub-microdegree differences are not lost to the
/// flat top of `acos`.
pub fn rotation_error_deg(a: &Pose, b: &Pose) -> f64 {
    let rel = a.rotation.transpose() * b.rotation;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (skew.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

pub fn translation_error_m(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn k500() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    pub(crate) fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        );
        Pose::from_axis_angle(&axis, rng.gen_range(0.0..PI), t)
    }

    #[test]
    fn identity_and_axis_rotation() {
        let x = CameraPoint::new(1.0, 2.0, 3.0);
        assert_eq!(camera_to_scene(&Pose::identity(), &x), x);
        assert_eq!(scene_to_camera(&Pose::identity(), &x), x);

        let rz = Pose::from_axis_angle(&Vector3::z(), PI / 2.0, Vector3::zeros());
        let out = rz.camera_to_scene(&CameraPoint::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(out, ScenePoint::new(0.0, 1.0, 0.0), epsilon = 1e-15);

        let shifted = Pose::new(Matrix3::identity(), Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(
            shifted.scene_to_camera(&ScenePoint::new(1.0, 1.0, 1.0)),
            CameraPoint::origin()
        );
    }

    #[test]
    fn camera_scene_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let x = CameraPoint::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.1..6.0),
            );
            let back = pose.scene_to_camera(&pose.camera_to_scene(&x));
            worst = worst.max((back - x).amax());
        }
        assert!(worst < 1e-12, "worst round-trip error {worst:e}");
    }

    #[test]
    fn project_examples() {
        let k = k500();
        assert_eq!(
            k.project(&CameraPoint::new(0.0, 0.0, 1.0)).unwrap(),
            Pixel::new(320.0, 240.0)
        );
        assert_eq!(
            k.project(&CameraPoint::new(1.0, 0.0, 1.0)).unwrap(),
            Pixel::new(820.0, 240.0)
        );
        assert!(matches!(
            k.project(&CameraPoint::new(1.0, 0.0, 0.0)),
            Err(RelocError::NonPositiveDepth(_))
        ));
        assert!(k.project(&CameraPoint::new(1.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn backproject_examples() {
        let k = k500();
        assert_eq!(
            k.backproject(&Pixel::new(320.0, 240.0), 2.0).unwrap(),
            CameraPoint::new(0.0, 0.0, 2.0)
        );
        assert_eq!(
            k.backproject(&Pixel::new(820.0, 240.0), 1.0).unwrap(),
            CameraPoint::new(1.0, 0.0, 1.0)
        );
        assert!(k.backproject(&Pixel::new(1.0, 1.0), 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let p = Pixel::new(rng.gen_range(-100.0..740.0), rng.gen_range(-100.0..580.0));
            let d = rng.gen_range(0.01..50.0);
            let q = k.project(&k.backproject(&p, d).unwrap()).unwrap();
            assert!((q - p).amax() < 1e-9);
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 2.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 2.0, 2.0, 4, 4).is_ok());
    }

    #[test]
    fn rotation_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_pose(&mut rng);
        assert_eq!(rotation_error_deg(&a, &a), 0.0);

        let rz5 = Pose::from_axis_angle(&Vector3::z(), 5f64.to_radians(), Vector3::zeros());
        let b = rz5.compose(&a);
        assert_abs_diff_eq!(rotation_error_deg(&a, &b), 5.0, epsilon = 1e-9);

        let rx180 = Pose::from_axis_angle(&Vector3::x(), PI, Vector3::zeros());
        let c = rx180.compose(&a);
        assert_abs_diff_eq!(rotation_error_deg(&a, &c), 180.0, epsilon = 1e-9);
    }

    #[test]
    fn rotation_error_resolves_tiny_angles() {
        let a = Pose::identity();
        let b = Pose::from_axis_angle(&Vector3::y(), 1e-9f64.to_radians(), Vector3::zeros());
        assert_abs_diff_eq!(rotation_error_deg(&a, &b), 1e-9, epsilon = 1e-15);
    }

    #[test]
    fn rotation_error_is_a_metric_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let (a, b, c) = (
                random_pose(&mut rng),
                random_pose(&mut rng),
                random_pose(&mut rng),
            );
            let ab = rotation_error_deg(&a, &b);
            assert_abs_diff_eq!(ab, rotation_error_deg(&b, &a), epsilon = 1e-9);
            assert!((0.0..=180.0).contains(&ab));
            assert!(ab <= rotation_error_deg(&a, &c) + rotation_error_deg(&c, &b) + 1e-9);
        }
    }

    #[test]
    fn translation_error_examples() {
        let a = Pose::identity();
        assert_eq!(translation_error_m(&a, &a), 0.0);
        let b = Pose::new(Matrix3::identity(), Vector3::new(0.03, 0.04, 0.0)).unwrap();
        assert_abs_diff_eq!(translation_error_m(&a, &b), 0.05, epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let q = random_pose(&mut rng);
            let (d0, d1, d2) = (
                p.translation.x - q.translation.x,
                p.translation.y - q.translation.y,
                p.translation.z - q.translation.z,
            );
            let expected = (d0 * d0 + d1 * d1 + d2 * d2).sqrt();
            assert_abs_diff_eq!(translation_error_m(&p, &q), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn pose_rejects_bad_rotations() {
        let mut r = Matrix3::identity();
        r[(0, 1)] = 1e-3;
        assert!(Pose::new(r, Vector3::zeros()).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflection, Vector3::zeros()).is_err());
        let mut nearly = Matrix3::identity();
        nearly[(0, 1)] = 1e-8;
        assert!(Pose::new(nearly, Vector3::zeros()).is_ok());
    }

    #[test]
    fn matrix_round_trip_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_pose(&mut rng);
        let q = Pose::from_matrix(&p.to_matrix()).unwrap();
        assert_eq!(p, q);
        let id = p.compose(&p.inverse());
        assert!(rotation_error_deg(&id, &Pose::identity()) < 1e-9);
        assert!(id.translation().norm() < 1e-12);
    }
}
