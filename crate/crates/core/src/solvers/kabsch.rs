use nalgebra::{Matrix3, Vector3};

use super::Match3D3D;
use crate::error::{RelocError, Result};
use crate::geometry::{Pose, ScenePoint};

/// Ratio `σ₂/σ₁` of the cross-covariance below which the configuration is
/// treated as collinear.
pub const DEGENERACY_RATIO: f64 = 1e-12;

/// Least-squares rigid transform `X ≈ R·x + t` from 3D-3D matches.
///
/// The matches are put into a canonical order before any summation, so the
/// result is bit-identical under permutation of the input.
pub fn kabsch(matches: &[Match3D3D]) -> Result<Pose> {
    if matches.len() < 3 {
        return Err(RelocError::TooFewPoints {
            needed: 3,
            got: matches.len(),
        });
    }
    let mut order: Vec<&Match3D3D> = matches.iter().collect();
    order.sort_by(|a, b| {
        let ka = a.camera_point.iter().chain(a.scene_point.iter());
        let kb = b.camera_point.iter().chain(b.scene_point.iter());
        ka.zip(kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let src: Vec<ScenePoint> = order.iter().map(|m| m.camera_point).collect();
    let dst: Vec<ScenePoint> = order.iter().map(|m| m.scene_point).collect();
    align_points(&src, &dst)
}

/// Rigid transform mapping `src` onto `dst` in the least-squares sense.
pub(crate) fn align_points(src: &[ScenePoint], dst: &[ScenePoint]) -> Result<Pose> {
    let n = src.len() as f64;
    let src_mean = src.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let dst_mean = dst.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;

    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (s.coords - src_mean) * (d.coords - dst_mean).transpose();
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(RelocError::DegenerateConfiguration("svd failed".into())),
    };
    let mut sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    if !(sigma[0] > 0.0) || sigma[1] < DEGENERACY_RATIO * sigma[0] {
        return Err(RelocError::DegenerateConfiguration(format!(
            "cross-covariance rank < 2 (singular values {sigma:?})"
        )));
    }

    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = dst_mean - rotation * src_mean;
    Pose::new(rotation, translation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_error_deg, translation_error_m, CameraPoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let t = Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
        Pose::from_axis_angle(&axis, rng.gen_range(0.0..3.1), t)
    }

    fn generate(rng: &mut impl Rng, pose: &Pose, n: usize) -> Vec<Match3D3D> {
        (0..n)
            .map(|_| {
                let x = CameraPoint::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.5..5.0),
                );
                Match3D3D {
                    camera_point: x,
                    scene_point: pose.camera_to_scene(&x),
                }
            })
            .collect()
    }

    #[test]
    fn identity_matches_give_identity() {
        let pts = [
            ScenePoint::new(0.0, 0.0, 0.0),
            ScenePoint::new(1.0, 0.0, 0.0),
            ScenePoint::new(0.0, 2.0, 0.0),
            ScenePoint::new(0.3, 0.1, 1.5),
        ];
        let matches: Vec<_> = pts
            .iter()
            .map(|&p| Match3D3D {
                camera_point: p,
                scene_point: p,
            })
            .collect();
        let pose = kabsch(&matches).unwrap();
        assert!(rotation_error_deg(&pose, &Pose::identity()) < 1e-9);
        assert!(pose.translation().norm() < 1e-12);
    }

    #[test]
    fn recovers_random_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let truth = random_pose(&mut rng);
            let matches = generate(&mut rng, &truth, 50);
            let est = kabsch(&matches).unwrap();
            assert!(rotation_error_deg(&est, &truth) < 1e-6);
            assert!(translation_error_m(&est, &truth) < 1e-9);
        }
    }

    #[test]
    fn degenerate_and_too_few() {
        let collinear: Vec<_> = (0..3)
            .map(|i| {
                let p = ScenePoint::new(i as f64, 2.0 * i as f64, 0.5);
                Match3D3D {
                    camera_point: p,
                    scene_point: p,
                }
            })
            .collect();
        assert!(matches!(
            kabsch(&collinear),
            Err(RelocError::DegenerateConfiguration(_))
        ));
        assert!(matches!(
            kabsch(&collinear[..2]),
            Err(RelocError::TooFewPoints { .. })
        ));
        let coincident = vec![collinear[0]; 5];
        assert!(kabsch(&coincident).is_err());
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = random_pose(&mut rng);
        let mut matches = generate(&mut rng, &truth, 40);
        for m in &mut matches {
            m.scene_point += Vector3::from_fn(|_, _| rng.gen_range(-0.05..0.05));
        }
        let a = kabsch(&matches).unwrap();
        matches.reverse();
        matches.swap(1, 30);
        let b = kabsch(&matches).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equivariant_under_scene_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let truth = random_pose(&mut rng);
            let mut matches = generate(&mut rng, &truth, 30);
            for m in &mut matches {
                m.scene_point += Vector3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
            }
            let moved_by = random_pose(&mut rng);
            let moved: Vec<_> = matches
                .iter()
                .map(|m| Match3D3D {
                    camera_point: m.camera_point,
                    scene_point: moved_by.camera_to_scene(&m.scene_point),
                })
                .collect();
            let expected = moved_by.compose(&kabsch(&matches).unwrap());
            let got = kabsch(&moved).unwrap();
            assert!((expected.to_matrix() - got.to_matrix()).amax() < 1e-9);
        }
    }
}
