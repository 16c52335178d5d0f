//! EPnP followed by Levenberg-Marquardt on the reprojection error.
//!
//! The scene points are expressed as barycentric combinations of four
//! control points (centroid plus the principal directions). The camera-frame
//! control points lie in the null space of a `2n × 12` system; candidate
//! solutions for one, two and three null-space vectors are polished with
//! Gauss-Newton on the inter-control-point distances and the one with the
//! lowest reprojection error seeds the final refinement.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3, Vector6};

use super::{kabsch::align_points, Match2D3D};
use crate::error::{RelocError, Result};
use crate::geometry::{CameraIntrinsics, CameraPoint, Pose, ScenePoint};

/// Smallest-to-largest principal variance ratio accepted for the scene points.
const PLANARITY_RATIO: f64 = 1e-10;
const BETA_GN_ITERS: usize = 10;
const LM_MAX_ITERS: usize = 50;

pub fn pnp(matches: &[Match2D3D], k: &CameraIntrinsics) -> Result<Pose> {
    if matches.len() < 6 {
        return Err(RelocError::TooFewPoints {
            needed: 6,
            got: matches.len(),
        });
    }
    let world: Vec<ScenePoint> = matches.iter().map(|m| m.scene_point).collect();
    let control = control_points(&world)?;
    let alphas = barycentric(&world, &control)?;

    let mut mtm = SMatrix::<f64, 12, 12>::zeros();
    for (m, a) in matches.iter().zip(&alphas) {
        let mut row_u = SVector::<f64, 12>::zeros();
        let mut row_v = SVector::<f64, 12>::zeros();
        for j in 0..4 {
            row_u[3 * j] = a[j] * k.fx;
            row_u[3 * j + 2] = a[j] * (k.cx - m.pixel.x);
            row_v[3 * j + 1] = a[j] * k.fy;
            row_v[3 * j + 2] = a[j] * (k.cy - m.pixel.y);
        }
        mtm += row_u * row_u.transpose() + row_v * row_v.transpose();
    }
    let eig = mtm.symmetric_eigen();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let kernel: Vec<SVector<f64, 12>> = order[..4]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    let rho: [f64; 6] = pairs.map(|(a, b)| (control[a] - control[b]).norm_squared());
    let l = distance_system(&kernel, &pairs);

    let mut best: Option<(Pose, f64)> = None;
    for betas in [
        betas_one(&l, &rho),
        betas_two(&l, &rho),
        betas_three(&l, &rho),
    ]
    .into_iter()
    .flatten()
    {
        let betas = refine_betas(&l, &rho, betas);
        let Some(pose) = pose_from_betas(&kernel, &betas, &alphas, &world) else {
            continue;
        };
        let err = mean_sq_reprojection(&pose, matches, k);
        if best.as_ref().map_or(true, |(_, e)| err < *e) {
            best = Some((pose, err));
        }
    }
    let (initial, _) = best.ok_or_else(|| {
        RelocError::DegenerateConfiguration("no EPnP candidate could be aligned".into())
    })?;
    let pose = refine_reprojection(initial, matches, k);

    let behind = matches
        .iter()
        .filter(|m| !(pose.scene_to_camera(&m.scene_point).z > 0.0))
        .count();
    if 2 * behind > matches.len() {
        return Err(RelocError::BehindCamera {
            behind,
            total: matches.len(),
        });
    }
    Ok(pose)
}

/// Per-match reprojection distance in pixels; `+∞` for points at or behind the camera.
pub fn reprojection_error_px(pose: &Pose, matches: &[Match2D3D], k: &CameraIntrinsics) -> Vec<f64> {
    matches
        .iter()
        .map(|m| match k.project(&pose.scene_to_camera(&m.scene_point)) {
            Ok(p) => (p - m.pixel).norm(),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

fn mean_sq_reprojection(pose: &Pose, matches: &[Match2D3D], k: &CameraIntrinsics) -> f64 {
    let errs = reprojection_error_px(pose, matches, k);
    errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64
}

fn control_points(world: &[ScenePoint]) -> Result<[Vector3<f64>; 4]> {
    let n = world.len() as f64;
    let centroid = world.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in world {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (largest, smallest) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[2]]);
    if !(largest > 0.0) || smallest < PLANARITY_RATIO * largest {
        return Err(RelocError::DegenerateConfiguration(format!(
            "scene points are coplanar or collinear (principal variances {:?})",
            eig.eigenvalues.as_slice()
        )));
    }
    let mut out = [centroid; 4];
    for (slot, &i) in out[1..].iter_mut().zip(&order) {
        *slot = centroid + eig.eigenvectors.column(i) * (eig.eigenvalues[i] / n).sqrt();
    }
    Ok(out)
}

fn barycentric(world: &[ScenePoint], control: &[Vector3<f64>; 4]) -> Result<Vec<[f64; 4]>> {
    let basis = Matrix3::from_columns(&[
        control[1] - control[0],
        control[2] - control[0],
        control[3] - control[0],
    ]);
    let inv = basis
        .try_inverse()
        .ok_or_else(|| RelocError::DegenerateConfiguration("singular control points".into()))?;
    Ok(world
        .iter()
        .map(|p| {
            let a = inv * (p.coords - control[0]);
            [1.0 - a.x - a.y - a.z, a.x, a.y, a.z]
        })
        .collect())
}

/// Index of `β_i·β_j` (i ≤ j) in the 10-vector of beta products.
fn product_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // ordering: 11 12 22 13 23 33 14 24 34 44
    j * (j + 1) / 2 + i
}

/// Rows express `‖c_a − c_b‖²` as linear functions of the beta products.
fn distance_system(kernel: &[SVector<f64, 12>], pairs: &[(usize, usize); 6]) -> SMatrix<f64, 6, 10> {
    let mut l = SMatrix::<f64, 6, 10>::zeros();
    for (row, &(a, b)) in pairs.iter().enumerate() {
        let dv: Vec<Vector3<f64>> = kernel
            .iter()
            .map(|v| {
                Vector3::new(
                    v[3 * a] - v[3 * b],
                    v[3 * a + 1] - v[3 * b + 1],
                    v[3 * a + 2] - v[3 * b + 2],
                )
            })
            .collect();
        for i in 0..4 {
            for j in i..4 {
                let factor = if i == j { 1.0 } else { 2.0 };
                l[(row, product_index(i, j))] = factor * dv[i].dot(&dv[j]);
            }
        }
    }
    l
}

fn least_squares(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    a.svd(true, true).solve(&b, 1e-14).ok()
}

fn betas_one(l: &SMatrix<f64, 6, 10>, rho: &[f64; 6]) -> Option<[f64; 4]> {
    // ‖β₁Δv₁‖ = ‖Δc‖ for every pair, solved in the distance domain.
    let idx = product_index(0, 0);
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..6 {
        let len = l[(r, idx)].max(0.0).sqrt();
        num += len * rho[r].sqrt();
        den += len * len;
    }
    (den > 0.0).then(|| [num / den, 0.0, 0.0, 0.0])
}

fn betas_two(l: &SMatrix<f64, 6, 10>, rho: &[f64; 6]) -> Option<[f64; 4]> {
    let cols = [product_index(0, 0), product_index(0, 1), product_index(1, 1)];
    let a = DMatrix::from_fn(6, 3, |r, c| l[(r, cols[c])]);
    let mut x = least_squares(a, DVector::from_row_slice(rho))?;
    if x[0] < 0.0 {
        x = -x;
    }
    let b1 = x[0].sqrt();
    let mut b2 = x[2].max(0.0).sqrt();
    if x[1] < 0.0 {
        b2 = -b2;
    }
    Some([b1, b2, 0.0, 0.0])
}

fn betas_three(l: &SMatrix<f64, 6, 10>, rho: &[f64; 6]) -> Option<[f64; 4]> {
    let cols = [
        product_index(0, 0),
        product_index(0, 1),
        product_index(1, 1),
        product_index(0, 2),
        product_index(1, 2),
    ];
    let a = DMatrix::from_fn(6, 5, |r, c| l[(r, cols[c])]);
    let mut x = least_squares(a, DVector::from_row_slice(rho))?;
    if x[0] < 0.0 {
        x = -x;
    }
    let b1 = x[0].sqrt();
    if b1 == 0.0 {
        return None;
    }
    let mut b2 = x[2].max(0.0).sqrt();
    if x[1] < 0.0 {
        b2 = -b2;
    }
    Some([b1, b2, x[3] / b1, 0.0])
}

fn beta_products(b: &[f64; 4]) -> SVector<f64, 10> {
    let mut out = SVector::<f64, 10>::zeros();
    for i in 0..4 {
        for j in i..4 {
            out[product_index(i, j)] = b[i] * b[j];
        }
    }
    out
}

/// Gauss-Newton on `L·B(β) = ρ` over all four betas.
fn refine_betas(l: &SMatrix<f64, 6, 10>, rho: &[f64; 6], mut betas: [f64; 4]) -> [f64; 4] {
    let target = SVector::<f64, 6>::from_row_slice(rho);
    for _ in 0..BETA_GN_ITERS {
        let residual = l * beta_products(&betas) - target;
        let mut jac = SMatrix::<f64, 6, 4>::zeros();
        for r in 0..6 {
            for k in 0..4 {
                let mut d = 0.0;
                for m in 0..4 {
                    let coeff = l[(r, product_index(k, m))];
                    d += if m == k { 2.0 * coeff * betas[k] } else { coeff * betas[m] };
                }
                jac[(r, k)] = d;
            }
        }
        let step = match jac.svd(true, true).solve(&residual, 1e-14) {
            Ok(s) => s,
            Err(_) => break,
        };
        for k in 0..4 {
            betas[k] -= step[k];
        }
        if step.norm() < 1e-15 {
            break;
        }
    }
    betas
}

fn pose_from_betas(
    kernel: &[SVector<f64, 12>],
    betas: &[f64; 4],
    alphas: &[[f64; 4]],
    world: &[ScenePoint],
) -> Option<Pose> {
    let combined = kernel
        .iter()
        .zip(betas)
        .fold(SVector::<f64, 12>::zeros(), |acc, (v, b)| acc + v * *b);
    let control: Vec<Vector3<f64>> = (0..4)
        .map(|j| Vector3::new(combined[3 * j], combined[3 * j + 1], combined[3 * j + 2]))
        .collect();
    let mut camera: Vec<CameraPoint> = alphas
        .iter()
        .map(|a| CameraPoint::from((0..4).fold(Vector3::zeros(), |acc, j| acc + control[j] * a[j])))
        .collect();
    let ahead = camera.iter().filter(|p| p.z > 0.0).count();
    if 2 * ahead < camera.len() {
        for p in &mut camera {
            p.coords = -p.coords;
        }
    }
    if !camera.iter().all(|p| p.coords.iter().all(|v| v.is_finite())) {
        return None;
    }
    align_points(&camera, world).ok()
}

/// Levenberg-Marquardt on the reprojection error, parameterized by a left
/// perturbation of the scene-to-camera transform.
fn refine_reprojection(initial: Pose, matches: &[Match2D3D], k: &CameraIntrinsics) -> Pose {
    let to_camera = initial.inverse();
    let mut rot = *to_camera.rotation();
    let mut trans = *to_camera.translation();
    // Points behind the camera have no reprojection, so they are counted
    // first: a step may never move more points behind the camera.
    let cost = |rot: &Matrix3<f64>, trans: &Vector3<f64>| -> (usize, f64) {
        let mut behind = 0;
        let mut sq = 0.0;
        for m in matches {
            let x = rot * m.scene_point.coords + trans;
            if x.z <= 0.0 {
                behind += 1;
                continue;
            }
            let du = k.fx * x.x / x.z + k.cx - m.pixel.x;
            let dv = k.fy * x.y / x.z + k.cy - m.pixel.y;
            sq += du * du + dv * dv;
        }
        (behind, sq)
    };
    let mut current = cost(&rot, &trans);
    let mut lambda = 1e-3;
    for _ in 0..LM_MAX_ITERS {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for m in matches {
            let x = rot * m.scene_point.coords + trans;
            if x.z <= 0.0 {
                continue;
            }
            let iz = 1.0 / x.z;
            let ru = k.fx * x.x * iz + k.cx - m.pixel.x;
            let rv = k.fy * x.y * iz + k.cy - m.pixel.y;
            // d(projection)/d(camera point)
            let pu = Vector3::new(k.fx * iz, 0.0, -k.fx * x.x * iz * iz);
            let pv = Vector3::new(0.0, k.fy * iz, -k.fy * x.y * iz * iz);
            // d(camera point)/d[δt, ω] = [I, −[x]×]
            let ju = Vector6::new(
                pu.x,
                pu.y,
                pu.z,
                x.y * pu.z - x.z * pu.y,
                x.z * pu.x - x.x * pu.z,
                x.x * pu.y - x.y * pu.x,
            );
            let jv = Vector6::new(
                pv.x,
                pv.y,
                pv.z,
                x.y * pv.z - x.z * pv.y,
                x.z * pv.x - x.x * pv.z,
                x.x * pv.y - x.y * pv.x,
            );
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = jtj;
            for i in 0..6 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let delta_r = nalgebra::Rotation3::new(Vector3::new(step[3], step[4], step[5]));
            let new_rot = delta_r * rot;
            let new_trans = delta_r * trans + Vector3::new(step[0], step[1], step[2]);
            let new_cost = cost(&new_rot, &new_trans);
            if new_cost.0 < current.0 || (new_cost.0 == current.0 && new_cost.1 <= current.1) {
                let converged = new_cost.0 == current.0
                    && (current.1 - new_cost.1 <= 1e-15 * current.1.max(1e-30) || step.norm() < 1e-14);
                rot = new_rot;
                trans = new_trans;
                current = new_cost;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !converged;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    // Snap back onto SO(3) before leaving.
    let svd = rot.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fixed = u * v_t;
    if fixed.determinant() < 0.0 {
        fixed = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) * v_t;
    }
    let to_camera = Pose::new(fixed, trans).unwrap_or(to_camera);
    to_camera.inverse()
}

type Matrix6 = SMatrix<f64, 6, 6>;
