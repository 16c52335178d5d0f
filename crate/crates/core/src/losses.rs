//! Training losses for dense scene-coordinate regression.
//!
//! `coords_loss` applies Tukey's biweight per coordinate over valid pixels,
//! `smooth_loss` is the depth-weighted graph-Laplacian term over a sampled
//! pixel set. Both return the analytic gradient with respect to the predicted
//! map so they can drive any regressor.

use nalgebra::Vector3;

use crate::error::{RelocError, Result};
use crate::geometry::ScenePoint;

/// Smoothing constant inside the neighbour-distance norm, `√(‖d‖² + ε²)`.
pub const SMOOTH_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TukeyConfig {
    c: f64,
}

impl TukeyConfig {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(RelocError::InvalidConfig(format!(
                "tukey constant must be positive, got {c}"
            )));
        }
        Ok(TukeyConfig { c })
    }

    /// Tuning constant set to half the scene diameter.
    pub fn from_scene_diameter(diameter: f64) -> Result<Self> {
        Self::new(diameter / 2.0)
    }

    pub fn c(&self) -> f64 {
        self.c
    }
}

/// Tukey's biweight `ρ(r)`; saturates at `c²/6` for `|r| ≥ c`.
pub fn tukey_rho(r: f64, c: f64) -> f64 {
    let sat = c * c / 6.0;
    if r.abs() <= c {
        let u = 1.0 - (r / c).powi(2);
        sat * (1.0 - u * u * u)
    } else {
        sat
    }
}

/// Derivative `ρ'(r) = r·(1 − (r/c)²)²` inside the window, zero outside.
pub fn tukey_psi(r: f64, c: f64) -> f64 {
    if r.abs() <= c {
        let u = 1.0 - (r / c).powi(2);
        r * u * u
    } else {
        0.0
    }
}

/// Row-major per-pixel depth in meters. Non-finite or non-positive entries are missing.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(RelocError::shape(width * height, values.len()));
        }
        Ok(DepthMap {
            width,
            height,
            values,
        })
    }

    pub fn is_valid(&self, i: usize) -> bool {
        let d = self.values[i];
        d.is_finite() && d > 0.0
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Row-major `h × w × 3` map of scene coordinates with a validity mask.
/// Masked-out pixels carry NaN coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMap {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<ScenePoint>,
    pub valid: Vec<bool>,
}

impl CoordinateMap {
    pub fn new(width: usize, height: usize, coords: Vec<ScenePoint>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if coords.len() != n || valid.len() != n {
            return Err(RelocError::shape(
                format!("{n} coords and mask entries"),
                format!("{} coords, {} mask", coords.len(), valid.len()),
            ));
        }
        let coords = coords
            .into_iter()
            .zip(&valid)
            .map(|(p, &ok)| if ok { p } else { Self::sentinel() })
            .collect();
        Ok(CoordinateMap {
            width,
            height,
            coords,
            valid,
        })
    }

    /// A map that is valid wherever the coordinate is finite.
    pub fn from_coords(width: usize, height: usize, coords: Vec<ScenePoint>) -> Result<Self> {
        let valid = coords
            .iter()
            .map(|p| p.coords.iter().all(|v| v.is_finite()))
            .collect();
        Self::new(width, height, coords, valid)
    }

    pub fn sentinel() -> ScenePoint {
        ScenePoint::new(f64::NAN, f64::NAN, f64::NAN)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn check_same_shape(&self, other_w: usize, other_h: usize) -> Result<()> {
        if self.width != other_w || self.height != other_h {
            return Err(RelocError::shape(
                format!("{}x{}", self.width, self.height),
                format!("{other_w}x{other_h}"),
            ));
        }
        Ok(())
    }
}

/// Per-pixel gradient of a loss with respect to the predicted coordinates.
pub type CoordGradient = Vec<Vector3<f64>>;

/// Tukey biweight loss over the three coordinate residuals of every pixel
/// that is valid in `gt`, normalized by the number of valid pixels.
pub fn coords_loss(
    pred: &CoordinateMap,
    gt: &CoordinateMap,
    cfg: &TukeyConfig,
) -> Result<(f64, CoordGradient)> {
    residual_loss(pred, gt, |r| (tukey_rho(r, cfg.c), tukey_psi(r, cfg.c)))
}

/// Plain ℓ1 variant of [`coords_loss`], kept for ablations.
pub fn l1_coords_loss(pred: &CoordinateMap, gt: &CoordinateMap) -> Result<(f64, CoordGradient)> {
    residual_loss(pred, gt, |r| (r.abs(), if r == 0.0 { 0.0 } else { r.signum() }))
}

fn residual_loss(
    pred: &CoordinateMap,
    gt: &CoordinateMap,
    rho: impl Fn(f64) -> (f64, f64),
) -> Result<(f64, CoordGradient)> {
    pred.check_same_shape(gt.width, gt.height)?;
    let mut grad = vec![Vector3::zeros(); pred.len()];
    let n_valid = gt.valid_count();
    if n_valid == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    for (i, g) in grad.iter_mut().enumerate() {
        if !gt.valid[i] {
            continue;
        }
        let r = pred.coords[i] - gt.coords[i];
        for s in 0..3 {
            let (value, slope) = rho(r[s]);
            loss += value;
            g[s] = slope * scale;
        }
    }
    Ok((loss * scale, grad))
}

/// Neighbourhood `K` as pixel offsets `(dx, dy)` around a centre pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodSpec {
    offsets: Vec<(i32, i32)>,
    width: usize,
    height: usize,
}

impl NeighborhoodSpec {
    pub fn new(offsets: Vec<(i32, i32)>, width: usize, height: usize) -> Result<Self> {
        if offsets.contains(&(0, 0)) {
            return Err(RelocError::InvalidConfig(
                "neighbourhood must not contain the centre offset".into(),
            ));
        }
        for (i, o) in offsets.iter().enumerate() {
            if offsets[..i].contains(o) {
                return Err(RelocError::InvalidConfig(format!(
                    "duplicate neighbourhood offset {o:?}"
                )));
            }
        }
        Ok(NeighborhoodSpec {
            offsets,
            width,
            height,
        })
    }

    /// The 8-connected ring.
    pub fn eight_connected(width: usize, height: usize) -> Self {
        let offsets = (-1..=1)
            .flat_map(|dy| (-1..=1).map(move |dx| (dx, dy)))
            .filter(|&o| o != (0, 0))
            .collect();
        NeighborhoodSpec {
            offsets,
            width,
            height,
        }
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    /// In-image neighbour indices of pixel `i`, in offset order.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = ((i % self.width) as i64, (i / self.width) as i64);
        let (w, h) = (self.width as i64, self.height as i64);
        self.offsets.iter().filter_map(move |&(dx, dy)| {
            let (nx, ny) = (x + dx as i64, y + dy as i64);
            (nx >= 0 && ny >= 0 && nx < w && ny < h).then(|| (ny * w + nx) as usize)
        })
    }
}

/// Normalized depth-similarity weights `w_ij ∝ exp(−|d_i − d_j|)` over the
/// neighbours of `i` that carry a valid depth.
pub fn laplacian_weights(
    depths: &DepthMap,
    i: usize,
    spec: &NeighborhoodSpec,
) -> Result<Vec<(usize, f64)>> {
    if depths.width != spec.width || depths.height != spec.height {
        return Err(RelocError::shape(
            format!("{}x{}", spec.width, spec.height),
            format!("{}x{}", depths.width, depths.height),
        ));
    }
    if i >= depths.len() {
        return Err(RelocError::shape(format!("index < {}", depths.len()), i));
    }
    let di = depths.values[i];
    let mut weights: Vec<(usize, f64)> = spec
        .neighbors(i)
        .filter(|&j| depths.is_valid(j))
        .map(|j| (j, (-(di - depths.values[j]).abs()).exp()))
        .collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    if weights.is_empty() || !(total > 0.0) {
        return Err(RelocError::EmptyNeighborhood(i));
    }
    for (_, w) in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Graph-Laplacian smoothness `Σ_i Σ_j w_ij·‖X̂_i − X̂_j‖` over `indices`,
/// using the ε-smoothed norm.
pub fn smooth_loss(
    pred: &CoordinateMap,
    depths: &DepthMap,
    spec: &NeighborhoodSpec,
    indices: &[usize],
) -> Result<(f64, CoordGradient)> {
    pred.check_same_shape(depths.width, depths.height)?;
    let mut grad = vec![Vector3::zeros(); pred.len()];
    let mut loss = 0.0;
    for &i in indices {
        if i >= pred.len() {
            return Err(RelocError::shape(format!("index < {}", pred.len()), i));
        }
        for (j, w) in laplacian_weights(depths, i, spec)? {
            let diff = pred.coords[i] - pred.coords[j];
            let norm = (diff.norm_squared() + SMOOTH_NORM_EPS * SMOOTH_NORM_EPS).sqrt();
            loss += w * norm;
            let g = diff * (w / norm);
            grad[i] += g;
            grad[j] -= g;
        }
    }
    Ok((loss, grad))
}

/// `coords_loss + smooth_loss` with the gradients summed.
pub fn total_loss(
    pred: &CoordinateMap,
    gt: &CoordinateMap,
    depths: &DepthMap,
    cfg: &TukeyConfig,
    spec: &NeighborhoodSpec,
    indices: &[usize],
) -> Result<(f64, CoordGradient)> {
    let (coords, mut grad) = coords_loss(pred, gt, cfg)?;
    let (smooth, smooth_grad) = smooth_loss(pred, depths, spec, indices)?;
    for (g, s) in grad.iter_mut().zip(&smooth_grad) {
        *g += s;
    }
    Ok((coords + smooth, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut impl Rng, w: usize, h: usize, scale: f64) -> CoordinateMap {
        let coords = (0..w * h)
            .map(|_| {
                ScenePoint::new(
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                )
            })
            .collect();
        CoordinateMap::from_coords(w, h, coords).unwrap()
    }

    #[test]
    fn tukey_examples() {
        assert_eq!(tukey_rho(0.0, 0.7), 0.0);
        assert_abs_diff_eq!(tukey_rho(0.7, 0.7), 0.49 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tukey_rho(1.4, 0.7), 0.49 / 6.0, epsilon = 1e-15);
        // (1/6)·(1 − 0.75³)
        assert_abs_diff_eq!(tukey_rho(0.5, 1.0), 0.096_354_166_666_666_67, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn tukey_is_even_bounded_and_monotone(r in -10.0f64..10.0, dr in 0.0f64..1.0, c in 0.01f64..5.0) {
            let sat = c * c / 6.0;
            prop_assert_eq!(tukey_rho(r, c), tukey_rho(-r, c));
            prop_assert!(tukey_rho(r, c) <= sat + 1e-15);
            prop_assert!(tukey_rho(r, c) >= 0.0);
            let (a, b) = (r.abs(), r.abs() + dr);
            prop_assert!(tukey_rho(b, c) >= tukey_rho(a, c) - 1e-15);
        }
    }

    #[test]
    fn tukey_continuous_at_threshold() {
        for c in [0.1, 1.0, 3.7] {
            let below = tukey_rho(c * (1.0 - 1e-12), c);
            let above = tukey_rho(c * (1.0 + 1e-12), c);
            assert_abs_diff_eq!(below, above, epsilon = 1e-12);
            assert_eq!(tukey_psi(c, c), 0.0);
        }
    }

    #[test]
    fn coords_loss_zero_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = random_map(&mut rng, 4, 3, 2.0);
        let (loss, grad) = coords_loss(&gt, &gt, &TukeyConfig::new(1.0).unwrap()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == Vector3::zeros()));
    }

    #[test]
    fn coords_loss_single_saturated_pixel() {
        let c = 0.8;
        let n = 6;
        let gt = CoordinateMap::from_coords(3, 2, vec![ScenePoint::origin(); n]).unwrap();
        let mut pred = gt.clone();
        pred.coords[4].x = c;
        let (loss, grad) = coords_loss(&pred, &gt, &TukeyConfig::new(c).unwrap()).unwrap();
        assert_abs_diff_eq!(loss, (c * c / 6.0) / n as f64, epsilon = 1e-15);
        assert_eq!(grad[4], Vector3::zeros());
    }

    #[test]
    fn coords_loss_ignores_masked_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = random_map(&mut rng, 4, 4, 1.0);
        let mut gt = random_map(&mut rng, 4, 4, 1.0);
        let mut valid = vec![true; 16];
        valid[3] = false;
        valid[9] = false;
        gt = CoordinateMap::new(4, 4, gt.coords, valid).unwrap();
        let (loss, grad) = coords_loss(&pred, &gt, &TukeyConfig::new(0.5).unwrap()).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grad[3], Vector3::zeros());
        assert_eq!(grad[9], Vector3::zeros());
        assert!(gt.coords[3].x.is_nan());
    }

    #[test]
    fn coords_loss_rejects_shape_mismatch() {
        let a = CoordinateMap::from_coords(2, 2, vec![ScenePoint::origin(); 4]).unwrap();
        let b = CoordinateMap::from_coords(4, 1, vec![ScenePoint::origin(); 4]).unwrap();
        assert!(matches!(
            coords_loss(&a, &b, &TukeyConfig::new(1.0).unwrap()),
            Err(RelocError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn coords_loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = random_map(&mut rng, 5, 5, 1.0);
        let gt = random_map(&mut rng, 5, 5, 1.0);
        let cfg = TukeyConfig::new(0.9).unwrap();
        let (loss, _) = coords_loss(&pred, &gt, &cfg).unwrap();
        let mut order: Vec<usize> = (0..25).collect();
        order.reverse();
        order.swap(3, 17);
        let permute = |m: &CoordinateMap| {
            CoordinateMap::from_coords(5, 5, order.iter().map(|&i| m.coords[i]).collect()).unwrap()
        };
        let (permuted, _) = coords_loss(&permute(&pred), &permute(&gt), &cfg).unwrap();
        assert_abs_diff_eq!(loss, permuted, epsilon = 1e-14);
    }

    #[test]
    fn laplacian_weight_examples() {
        let uniform = DepthMap::new(3, 3, vec![2.0; 9]).unwrap();
        let spec = NeighborhoodSpec::eight_connected(3, 3);
        let w = laplacian_weights(&uniform, 4, &spec).unwrap();
        assert_eq!(w.len(), 8);
        for (_, wij) in &w {
            assert_abs_diff_eq!(*wij, 0.125, epsilon = 1e-15);
        }

        let two = DepthMap::new(3, 1, vec![1.0, 1.0, 2.0]).unwrap();
        let spec = NeighborhoodSpec::new(vec![(-1, 0), (1, 0)], 3, 1).unwrap();
        let w = laplacian_weights(&two, 1, &spec).unwrap();
        assert_abs_diff_eq!(w[0].1, 0.731_058_578_630_004_9, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1].1, 0.268_941_421_369_995_1, epsilon = 1e-12);

        let lonely = DepthMap::new(3, 1, vec![f64::NAN, 1.0, 0.0]).unwrap();
        assert!(matches!(
            laplacian_weights(&lonely, 1, &spec),
            Err(RelocError::EmptyNeighborhood(1))
        ));
    }

    #[test]
    fn laplacian_weights_form_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (9, 7);
        let values = (0..w * h)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    f64::NAN
                } else {
                    rng.gen_range(0.3..6.0)
                }
            })
            .collect();
        let depths = DepthMap::new(w, h, values).unwrap();
        let spec = NeighborhoodSpec::eight_connected(w, h);
        for i in 0..w * h {
            if let Ok(weights) = laplacian_weights(&depths, i, &spec) {
                let sum: f64 = weights.iter().map(|(_, w)| w).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                assert!(weights.iter().all(|(j, w)| *w >= 0.0 && depths.is_valid(*j)));
            }
        }
    }

    #[test]
    fn neighborhood_spec_validation() {
        assert!(NeighborhoodSpec::new(vec![(0, 0)], 2, 2).is_err());
        assert!(NeighborhoodSpec::new(vec![(1, 0), (1, 0)], 2, 2).is_err());
        let corner: Vec<usize> = NeighborhoodSpec::eight_connected(3, 3).neighbors(0).collect();
        assert_eq!(corner, vec![1, 3, 4]);
    }

    #[test]
    fn smooth_loss_examples() {
        let depths = DepthMap::new(4, 4, vec![1.5; 16]).unwrap();
        let spec = NeighborhoodSpec::eight_connected(4, 4);
        let constant =
            CoordinateMap::from_coords(4, 4, vec![ScenePoint::new(0.3, -1.0, 2.0); 16]).unwrap();
        let indices: Vec<usize> = (0..16).collect();
        let (loss, _) = smooth_loss(&constant, &depths, &spec, &indices).unwrap();
        assert!(loss >= 0.0 && loss <= SMOOTH_NORM_EPS * indices.len() as f64 * (1.0 + 1e-9));

        let depths = DepthMap::new(2, 1, vec![1.0, 1.0]).unwrap();
        let spec = NeighborhoodSpec::eight_connected(2, 1);
        let pair = CoordinateMap::from_coords(
            2,
            1,
            vec![ScenePoint::new(0.0, 0.0, 0.0), ScenePoint::new(0.0, 1.0, 0.0)],
        )
        .unwrap();
        let (loss, grad) = smooth_loss(&pair, &depths, &spec, &[0]).unwrap();
        assert_abs_diff_eq!(loss, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[0], Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(grad[1], Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn total_loss_is_the_sum_of_its_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = random_map(&mut rng, 6, 5, 1.0);
        let gt = random_map(&mut rng, 6, 5, 1.0);
        let depths = DepthMap::new(6, 5, (0..30).map(|i| 1.0 + 0.1 * i as f64).collect()).unwrap();
        let spec = NeighborhoodSpec::eight_connected(6, 5);
        let cfg = TukeyConfig::new(0.7).unwrap();
        let idx = [0, 7, 13, 29];
        let (a, ga) = coords_loss(&pred, &gt, &cfg).unwrap();
        let (b, gb) = smooth_loss(&pred, &depths, &spec, &idx).unwrap();
        let (t, gt_) = total_loss(&pred, &gt, &depths, &cfg, &spec, &idx).unwrap();
        assert_eq!(t, a + b);
        for i in 0..30 {
            assert_eq!(gt_[i], ga[i] + gb[i]);
        }
        let (zero, _) = total_loss(
            &CoordinateMap::from_coords(6, 5, vec![ScenePoint::origin(); 30]).unwrap(),
            &CoordinateMap::from_coords(6, 5, vec![ScenePoint::origin(); 30]).unwrap(),
            &depths,
            &cfg,
            &spec,
            &idx,
        )
        .unwrap();
        assert!(zero <= SMOOTH_NORM_EPS * idx.len() as f64 * (1.0 + 1e-9));
    }
}
