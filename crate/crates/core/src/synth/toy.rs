//! Per-pixel MLP regressing scene coordinates from `(u, v, depth)`, trained
//! with the robust coordinate loss and optional Laplacian smoothing.
//!
//! The mapping is only well-posed for a fixed viewpoint, so the training
//! frames are expected to share one pose; they differ in their label noise.

use nalgebra::{DMatrix, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SyntheticFrame;
use crate::error::{RelocError, Result};
use crate::geometry::{CameraIntrinsics, ScenePoint};
use crate::losses::{
    coords_loss, l1_coords_loss, smooth_loss, CoordGradient, CoordinateMap, NeighborhoodSpec,
    TukeyConfig,
};
use crate::nnet::{Activation, DenseNet, RmspropState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordLoss {
    Tukey,
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyRegressorConfig {
    pub hidden: Vec<usize>,
    pub loss: CoordLoss,
    /// Tukey tuning constant; half the scene diameter when absent.
    pub tukey_c: Option<f64>,
    /// Multiplier on the smoothing term, which is averaged over the batch.
    /// Zero disables smoothing.
    pub smooth_weight: f64,
    pub steps: usize,
    /// Labelled pixels per step.
    pub batch: usize,
    pub learning_rate: f64,
    /// The learning rate follows a cosine from `learning_rate` down to this
    /// fraction of it, so the final weights settle instead of jittering.
    pub final_lr_fraction: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ToyRegressorConfig {
    fn default() -> Self {
        ToyRegressorConfig {
            hidden: vec![32, 32],
            loss: CoordLoss::Tukey,
            tukey_c: None,
            smooth_weight: 0.0,
            steps: 4000,
            batch: 500,
            learning_rate: 2e-3,
            final_lr_fraction: 0.02,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Trained network plus the input/output scaling it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRegressor {
    pub net: DenseNet,
    intrinsics: CameraIntrinsics,
    center: ScenePoint,
    half_diameter: f64,
}

impl ToyRegressor {
    fn input(&self, index: usize, depth: f64) -> [f64; 3] {
        let w = self.intrinsics.width as usize;
        let p = CameraIntrinsics::pixel_center(index % w, index / w);
        [
            2.0 * p.x / self.intrinsics.width as f64 - 1.0,
            2.0 * p.y / self.intrinsics.height as f64 - 1.0,
            depth / self.half_diameter - 1.0,
        ]
    }

    fn batch_inputs(&self, depths: &[f64], indices: &[usize]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(indices.len(), 3);
        for (r, &i) in indices.iter().enumerate() {
            for (c, v) in self.input(i, depths[i]).into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        m
    }

    fn decode(&self, out: &DMatrix<f64>, r: usize) -> ScenePoint {
        self.center + Vector3::new(out[(r, 0)], out[(r, 1)], out[(r, 2)]) * self.half_diameter
    }

    /// Predicted scene coordinates of pixels `indices` given the frame depth.
    pub fn predict(&self, depths: &[f64], indices: &[usize]) -> Result<Vec<ScenePoint>> {
        let out = self.net.forward(&self.batch_inputs(depths, indices))?;
        Ok((0..indices.len()).map(|r| self.decode(&out, r)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub initial_error: f64,
    pub final_error: f64,
    pub step_losses: Vec<f64>,
}

/// Mean distance between predictions and ground truth over `indices` of
/// `frame`.
pub fn mean_coordinate_error(model: &ToyRegressor, frame: &SyntheticFrame, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(RelocError::EmptyInput);
    }
    let pred = model.predict(&frame.depth.values, indices)?;
    let total: f64 = pred
        .iter()
        .zip(indices)
        .map(|(p, &i)| (p - frame.ground_truth.coords[i]).norm())
        .sum();
    Ok(total / indices.len() as f64)
}

struct Split {
    train: Vec<usize>,
    holdout: Vec<usize>,
}

/// Pixels with a label and at least one valid-depth neighbour, split into
/// training and held-out sets by a seeded shuffle.
fn split_pixels(frame: &SyntheticFrame, spec: &NeighborhoodSpec, holdout: f64, rng: &mut impl Rng) -> Split {
    let usable: Vec<usize> = frame
        .correspondence_pixels()
        .into_iter()
        .filter(|&i| spec.neighbors(i).any(|j| frame.depth.is_valid(j)))
        .collect();
    let n_hold = (usable.len() as f64 * holdout).round() as usize;
    let order = sample(rng, usable.len(), usable.len()).into_vec();
    let shuffled: Vec<usize> = order.iter().map(|&k| usable[k]).collect();
    let (h, t) = shuffled.split_at(n_hold);
    let mut holdout = h.to_vec();
    let mut train = t.to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    Split { train, holdout }
}

/// Trains the toy regressor on the predicted (noisy) maps of `frames` and
/// reports the mean ground-truth error on held-out pixels before and after.
pub fn train_toy_regressor(
    frames: &[SyntheticFrame],
    scene_center: ScenePoint,
    scene_diameter: f64,
    cfg: &ToyRegressorConfig,
) -> Result<(ToyRegressor, ToyReport)> {
    let first = frames.first().ok_or(RelocError::EmptyTrainingSet)?;
    if frames.iter().any(|f| f.intrinsics != first.intrinsics) {
        return Err(RelocError::InvalidConfig("toy frames must share intrinsics".into()));
    }
    if cfg.batch == 0 || cfg.steps == 0 || !(0.0..1.0).contains(&cfg.holdout_fraction) || cfg.smooth_weight < 0.0
        || !(0.0..=1.0).contains(&cfg.final_lr_fraction)
    {
        return Err(RelocError::InvalidConfig("invalid toy regressor config".into()));
    }
    let tukey = match cfg.tukey_c {
        Some(c) => TukeyConfig::new(c)?,
        None => TukeyConfig::from_scene_diameter(scene_diameter)?,
    };
    let (w, h) = (first.depth.width, first.depth.height);
    let spec = NeighborhoodSpec::eight_connected(w, h);

    let mut widths = vec![3];
    widths.extend(&cfg.hidden);
    widths.push(3);
    let mut activations = vec![Activation::Tanh; cfg.hidden.len()];
    activations.push(Activation::Identity);
    let mut model = ToyRegressor {
        net: DenseNet::xavier(&widths, &activations, cfg.seed)?,
        intrinsics: first.intrinsics,
        center: scene_center,
        half_diameter: scene_diameter / 2.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let splits: Vec<Split> = frames
        .iter()
        .map(|f| split_pixels(f, &spec, cfg.holdout_fraction, &mut rng))
        .collect();
    if splits.iter().all(|s| s.train.is_empty()) {
        return Err(RelocError::EmptyTrainingSet);
    }
    let holdout_error = |model: &ToyRegressor| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (f, s) in frames.iter().zip(&splits) {
            if s.holdout.is_empty() {
                continue;
            }
            total += mean_coordinate_error(model, f, &s.holdout)? * s.holdout.len() as f64;
            count += s.holdout.len();
        }
        if count == 0 {
            return Err(RelocError::EmptyInput);
        }
        Ok(total / count as f64)
    };
    let initial_error = holdout_error(&model)?;

    let mut opt = RmspropState::new(model.net.param_count(), cfg.learning_rate)?;
    let mut step_losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let progress = step as f64 / cfg.steps as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.learning_rate = cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
        let fi = step % frames.len();
        let (frame, split) = (&frames[fi], &splits[fi]);
        if split.train.is_empty() {
            continue;
        }
        let take = cfg.batch.min(split.train.len());
        let mut batch: Vec<usize> = sample(&mut rng, split.train.len(), take)
            .into_iter()
            .map(|k| split.train[k])
            .collect();
        batch.sort_unstable();
        let (loss, grad_x, needed) = step_loss(&model, frame, &batch, &spec, &tukey, cfg)?;
        if !loss.is_finite() {
            return Err(RelocError::DivergedTraining { epoch: step });
        }
        step_losses.push(loss);

        let cache = model.net.forward_cached(&model.batch_inputs(&frame.depth.values, &needed))?;
        let mut out_grad = DMatrix::zeros(needed.len(), 3);
        for (r, &i) in needed.iter().enumerate() {
            for c in 0..3 {
                out_grad[(r, c)] = grad_x[i][c] * model.half_diameter;
            }
        }
        let (grads, _) = model.net.backward(&cache, &out_grad)?;
        opt.step_net(&mut model.net, &grads)?;
    }

    let final_error = holdout_error(&model)?;
    if !final_error.is_finite() {
        return Err(RelocError::DivergedTraining { epoch: cfg.steps });
    }
    Ok((
        model,
        ToyReport {
            initial_error,
            final_error,
            step_losses,
        },
    ))
}

/// Loss and per-pixel coordinate gradient for one batch. Returns the pixels
/// that were evaluated (batch plus smoothing neighbours).
fn step_loss(
    model: &ToyRegressor,
    frame: &SyntheticFrame,
    batch: &[usize],
    spec: &NeighborhoodSpec,
    tukey: &TukeyConfig,
    cfg: &ToyRegressorConfig,
) -> Result<(f64, CoordGradient, Vec<usize>)> {
    let n = frame.depth.len();
    let smoothing = cfg.smooth_weight > 0.0;
    let mut needed: Vec<usize> = batch.to_vec();
    if smoothing {
        for &i in batch {
            needed.extend(spec.neighbors(i).filter(|&j| frame.depth.is_valid(j)));
        }
        needed.sort_unstable();
        needed.dedup();
    }
    let pred_pts = model.predict(&frame.depth.values, &needed)?;
    let mut coords = vec![CoordinateMap::sentinel(); n];
    let mut valid = vec![false; n];
    for (&i, p) in needed.iter().zip(pred_pts) {
        coords[i] = p;
        valid[i] = true;
    }
    let pred = CoordinateMap::new(frame.depth.width, frame.depth.height, coords, valid)?;

    let mut label_coords = vec![CoordinateMap::sentinel(); n];
    let mut label_valid = vec![false; n];
    for &i in batch {
        label_coords[i] = frame.predicted.coords[i];
        label_valid[i] = true;
    }
    let labels = CoordinateMap::new(frame.depth.width, frame.depth.height, label_coords, label_valid)?;

    let (mut loss, mut grad) = match cfg.loss {
        CoordLoss::Tukey => coords_loss(&pred, &labels, tukey)?,
        CoordLoss::L1 => l1_coords_loss(&pred, &labels)?,
    };
    if smoothing {
        let (s, sg) = smooth_loss(&pred, &frame.depth, spec, batch)?;
        let k = cfg.smooth_weight / batch.len() as f64;
        loss += k * s;
        for (g, d) in grad.iter_mut().zip(&sg) {
            *g += d * k;
        }
    }
    Ok((loss, grad, needed))
}
