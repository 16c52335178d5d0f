//! Per-correspondence confidence: training targets, the point-set regressor
//! and its training loop.
//!
//! The regressor follows the PointNet segmentation layout: a shared per-point
//! encoder (5 → 32 → 64), a max-pool over the point set giving a global
//! context vector, and a per-point head (128 → 32 → 1) fed with the point
//! feature concatenated with the context. The head ends in `tanh` followed by
//! `relu`, so every output lies in `[0, 1)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RelocError, Result};
use crate::geometry::{CameraIntrinsics, Pixel, ScenePoint};
use crate::nnet::{Activation, DenseNet, Gradients, RmspropState};
use crate::pipeline::Frame;

/// Scale of the exponential confidence target; `δ = exp(−s·‖X − X̂‖)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfidenceScale(f64);

impl ConfidenceScale {
    /// Gives inliers at 0.1 m a target of 0.75.
    pub const DEFAULT: ConfidenceScale = ConfidenceScale(2.8768);

    pub fn new(s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(RelocError::InvalidConfig(format!(
                "confidence scale must be positive, got {s}"
            )));
        }
        Ok(ConfidenceScale(s))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for ConfidenceScale {
    fn default() -> Self {
        Self::DEFAULT
    }
}

pub fn delta_target(gt: &ScenePoint, pred: &ScenePoint, s: ConfidenceScale) -> f64 {
    (-s.0 * (gt - pred).norm()).exp()
}

/// Scale for which a coordinate error of `t_inlier` maps to `p_lower`.
///
/// # Panics
/// If `t_inlier <= 0` or `p_lower` is outside `(0, 1)`.
pub fn solve_scale(t_inlier: f64, p_lower: f64) -> f64 {
    assert!(t_inlier > 0.0, "inlier threshold must be positive");
    assert!(p_lower > 0.0 && p_lower < 1.0, "probability must lie in (0, 1)");
    -p_lower.ln() / t_inlier
}

/// Maps raw pixels and scene coordinates to the bounded network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub scene_center: [f64; 3],
    pub half_diameter: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl Normalization {
    /// Centre and half diagonal of the bounding box of `points`.
    pub fn from_points(points: &[ScenePoint], k: &CameraIntrinsics) -> Result<Self> {
        let first = points.first().ok_or(RelocError::EmptyInput)?;
        let (mut lo, mut hi) = (first.coords, first.coords);
        for p in points {
            lo = lo.inf(&p.coords);
            hi = hi.sup(&p.coords);
        }
        let half_diameter = (hi - lo).norm() / 2.0;
        if !(half_diameter > 0.0 && half_diameter.is_finite()) {
            return Err(RelocError::DegenerateConfiguration(
                "scene points span no volume".into(),
            ));
        }
        let c = (lo + hi) / 2.0;
        Ok(Normalization {
            scene_center: [c.x, c.y, c.z],
            half_diameter,
            image_width: k.width as f64,
            image_height: k.height as f64,
        })
    }

    pub fn input(&self, pixel: &Pixel, coord: &ScenePoint) -> [f64; 5] {
        [
            2.0 * pixel.x / self.image_width - 1.0,
            2.0 * pixel.y / self.image_height - 1.0,
            (coord.x - self.scene_center[0]) / self.half_diameter,
            (coord.y - self.scene_center[1]) / self.half_diameter,
            (coord.z - self.scene_center[2]) / self.half_diameter,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceSample {
    pub pixel: Pixel,
    pub coord: ScenePoint,
    pub target: f64,
}

const POINT_FEATURES: usize = 64;
const LARGEST_BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
/// Initial bias of the output unit, keeping fresh models inside the active
/// region of the final relu.
const OUTPUT_BIAS_INIT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceModel {
    encoder: DenseNet,
    head: DenseNet,
    normalization: Normalization,
    scale: ConfidenceScale,
}

struct FramePass {
    encoder_cache: crate::nnet::ForwardCache,
    head_cache: crate::nnet::ForwardCache,
    argmax: Vec<usize>,
    outputs: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    encoder_layers: usize,
    head_layers: usize,
    normalization: Normalization,
    scale: ConfidenceScale,
}

impl ConfidenceModel {
    pub fn new(normalization: Normalization, scale: ConfidenceScale, seed: u64) -> Self {
        let encoder = DenseNet::xavier(&[5, 32, POINT_FEATURES], &[Activation::Relu, Activation::Relu], seed)
            .expect("static architecture");
        let mut head = DenseNet::xavier(
            &[2 * POINT_FEATURES, 32, 1],
            &[Activation::Relu, Activation::Tanh],
            seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        )
        .expect("static architecture");
        head.layers_mut()[1].bias[0] = OUTPUT_BIAS_INIT;
        ConfidenceModel {
            encoder,
            head,
            normalization,
            scale,
        }
    }

    /// Model with every weight and bias set to zero.
    pub fn zeroed(normalization: Normalization, scale: ConfidenceScale) -> Self {
        let mut model = Self::new(normalization, scale, 0);
        for net in [&mut model.encoder, &mut model.head] {
            let zeros = vec![0.0; net.param_count()];
            net.set_params(&zeros).expect("same length");
        }
        model
    }

    pub fn from_parts(
        encoder: DenseNet,
        head: DenseNet,
        normalization: Normalization,
        scale: ConfidenceScale,
    ) -> Result<Self> {
        if encoder.input_width() != 5 || head.output_width() != 1 {
            return Err(RelocError::shape(
                "encoder input 5, head output 1",
                format!("{}, {}", encoder.input_width(), head.output_width()),
            ));
        }
        if head.input_width() != 2 * encoder.output_width() {
            return Err(RelocError::shape(2 * encoder.output_width(), head.input_width()));
        }
        Ok(ConfidenceModel {
            encoder,
            head,
            normalization,
            scale,
        })
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn scale(&self) -> ConfidenceScale {
        self.scale
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn head(&self) -> &DenseNet {
        &self.head
    }

    fn inputs(&self, pixels: &[Pixel], coords: &[ScenePoint]) -> Result<DMatrix<f64>> {
        if pixels.len() != coords.len() {
            return Err(RelocError::LengthMismatch {
                left: pixels.len(),
                right: coords.len(),
            });
        }
        if pixels.is_empty() {
            return Err(RelocError::EmptyInput);
        }
        let mut m = DMatrix::zeros(pixels.len(), 5);
        for (r, (p, x)) in pixels.iter().zip(coords).enumerate() {
            for (c, v) in self.normalization.input(p, x).into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        Ok(m)
    }

    fn run(&self, inputs: &DMatrix<f64>) -> Result<FramePass> {
        let encoder_cache = self.encoder.forward_cached(inputs)?;
        let features = encoder_cache.output();
        let n = features.nrows();
        let width = features.ncols();
        let mut argmax = vec![0usize; width];
        for (c, best) in argmax.iter_mut().enumerate() {
            for r in 1..n {
                if features[(r, c)] > features[(*best, c)] {
                    *best = r;
                }
            }
        }
        let mut head_in = DMatrix::zeros(n, 2 * width);
        for r in 0..n {
            for c in 0..width {
                head_in[(r, c)] = features[(r, c)];
                head_in[(r, width + c)] = features[(argmax[c], c)];
            }
        }
        let head_cache = self.head.forward_cached(&head_in)?;
        // tanh rounds to exactly 1.0 for large inputs in f64
        let outputs = head_cache
            .output()
            .column(0)
            .iter()
            .map(|y| y.clamp(0.0, LARGEST_BELOW_ONE))
            .collect();
        Ok(FramePass {
            encoder_cache,
            head_cache,
            argmax,
            outputs,
        })
    }

    /// Confidence for every `(pixel, coordinate)` pair of one point set.
    pub fn predict(&self, pixels: &[Pixel], coords: &[ScenePoint]) -> Result<Vec<f64>> {
        let inputs = self.inputs(pixels, coords)?;
        Ok(self.run(&inputs)?.outputs)
    }

    /// Mean squared error over the set and its parameter gradients.
    fn frame_gradients(&self, inputs: &DMatrix<f64>, targets: &[f64]) -> Result<(f64, Gradients, Gradients)> {
        let pass = self.run(inputs)?;
        let n = targets.len() as f64;
        let mut loss = 0.0;
        let mut d_pre = DMatrix::zeros(targets.len(), 1);
        let pre = pass.head_cache.output();
        for (i, (&out, &target)) in pass.outputs.iter().zip(targets).enumerate() {
            let diff = out - target;
            loss += diff * diff;
            if pre[(i, 0)] > 0.0 {
                d_pre[(i, 0)] = 2.0 * diff / n;
            }
        }
        let (head_grads, d_head_in) = self.head.backward(&pass.head_cache, &d_pre)?;
        let width = POINT_FEATURES;
        let mut d_features = d_head_in.columns(0, width).into_owned();
        for (c, &r) in pass.argmax.iter().enumerate() {
            d_features[(r, c)] += d_head_in.column(width + c).sum();
        }
        let (encoder_grads, _) = self.encoder.backward(&pass.encoder_cache, &d_features)?;
        Ok((loss / n, encoder_grads, head_grads))
    }

    /// Writes the two networks as consecutive `RLNN` containers at `path`
    /// and the normalization constants to `path` + `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(File::create(path).map_err(|e| RelocError::io(path, e))?);
        self.encoder
            .write_to(&mut file)
            .and_then(|_| self.head.write_to(&mut file))
            .and_then(|_| file.flush())
            .map_err(|e| RelocError::io(path, e))?;
        let sidecar = Sidecar {
            encoder_layers: self.encoder.layers().len(),
            head_layers: self.head.layers().len(),
            normalization: self.normalization,
            scale: self.scale,
        };
        let sidecar_path = sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar).expect("plain data serializes");
        std::fs::write(&sidecar_path, text + "\n").map_err(|e| RelocError::io(&sidecar_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar_path = sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar_path).map_err(|e| RelocError::io(&sidecar_path, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| RelocError::format(&sidecar_path, e.to_string()))?;
        let mut file = BufReader::new(File::open(path).map_err(|e| RelocError::io(path, e))?);
        let wrap = |e: RelocError| RelocError::format(path, e.to_string());
        let encoder = DenseNet::read_from(&mut file).map_err(wrap)?;
        let head = DenseNet::read_from(&mut file).map_err(wrap)?;
        if encoder.layers().len() != sidecar.encoder_layers || head.layers().len() != sidecar.head_layers {
            return Err(RelocError::format(path, "layer counts disagree with sidecar"));
        }
        ConfidenceModel::from_parts(encoder, head, sidecar.normalization, sidecar.scale).map_err(wrap)
    }
}

pub fn sidecar_path(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn predict_confidences(model: &ConfidenceModel, pixels: &[Pixel], coords: &[ScenePoint]) -> Result<Vec<f64>> {
    model.predict(pixels, coords)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfidenceTrainingConfig {
    pub epochs: usize,
    /// Frames per optimizer step.
    pub batch_frames: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ConfidenceTrainingConfig {
    fn default() -> Self {
        ConfidenceTrainingConfig {
            epochs: 200,
            batch_frames: 20,
            learning_rate: RmspropState::DEFAULT_LEARNING_RATE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Mean per-frame squared error, averaged over each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainingReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Fits a confidence model to frames of labelled points with RMSprop on
/// the squared error `Σ(δ − δ̂)²`, averaged per frame.
pub fn train_confidence(
    frames: &[Vec<ConfidenceSample>],
    normalization: Normalization,
    scale: ConfidenceScale,
    cfg: &ConfidenceTrainingConfig,
) -> Result<(ConfidenceModel, TrainingReport)> {
    let frames: Vec<&Vec<ConfidenceSample>> = frames.iter().filter(|f| !f.is_empty()).collect();
    if frames.is_empty() {
        return Err(RelocError::EmptyTrainingSet);
    }
    if cfg.batch_frames == 0 {
        return Err(RelocError::InvalidConfig("batch_frames must be at least 1".into()));
    }
    let mut model = ConfidenceModel::new(normalization, scale, cfg.seed);
    let prepared: Vec<(DMatrix<f64>, Vec<f64>)> = frames
        .iter()
        .map(|f| {
            let pixels: Vec<Pixel> = f.iter().map(|s| s.pixel).collect();
            let coords: Vec<ScenePoint> = f.iter().map(|s| s.coord).collect();
            let targets = f.iter().map(|s| s.target).collect();
            Ok((model.inputs(&pixels, &coords)?, targets))
        })
        .collect::<Result<_>>()?;

    let mut enc_opt = RmspropState::new(model.encoder.param_count(), cfg.learning_rate)?;
    let mut head_opt = RmspropState::new(model.head.param_count(), cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_frames) {
            let mut enc_grads = Gradients::zeros_like(&model.encoder);
            let mut head_grads = Gradients::zeros_like(&model.head);
            for &i in batch {
                let (inputs, targets) = &prepared[i];
                let (loss, eg, hg) = model.frame_gradients(inputs, targets)?;
                epoch_loss += loss;
                enc_grads.accumulate(&eg);
                head_grads.accumulate(&hg);
            }
            let inv = 1.0 / batch.len() as f64;
            enc_grads.scale(inv);
            head_grads.scale(inv);
            enc_opt.step_net(&mut model.encoder, &enc_grads)?;
            head_opt.step_net(&mut model.head, &head_grads)?;
        }
        let mean = epoch_loss / prepared.len() as f64;
        if !mean.is_finite() {
            return Err(RelocError::DivergedTraining { epoch });
        }
        log::debug!("confidence epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok((model, TrainingReport { epoch_losses }))
}

/// Gradient of the frame loss with respect to every parameter, flattened
/// encoder-first. Exposed for gradient checks.
pub fn frame_loss_and_gradient(
    model: &ConfidenceModel,
    samples: &[ConfidenceSample],
) -> Result<(f64, Vec<f64>)> {
    let pixels: Vec<Pixel> = samples.iter().map(|s| s.pixel).collect();
    let coords: Vec<ScenePoint> = samples.iter().map(|s| s.coord).collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let inputs = model.inputs(&pixels, &coords)?;
    let (loss, eg, hg) = model.frame_gradients(&inputs, &targets)?;
    let mut flat = eg.flatten();
    flat.extend(hg.flatten());
    Ok((loss, flat))
}

/// Flattened parameters in the order used by [`frame_loss_and_gradient`].
pub fn model_params(model: &ConfidenceModel) -> Vec<f64> {
    let mut p = model.encoder.params();
    p.extend(model.head.params());
    p
}

pub fn set_model_params(model: &mut ConfidenceModel, params: &[f64]) -> Result<()> {
    let n = model.encoder.param_count();
    if params.len() != n + model.head.param_count() {
        return Err(RelocError::shape(n + model.head.param_count(), params.len()));
    }
    model.encoder.set_params(&params[..n])?;
    model.head.set_params(&params[n..])
}

/// Draws `n_k` correspondences of `frame` without replacement and labels
/// them with their exact target.
pub fn draw_confidence_samples(
    frame: &Frame,
    n_k: usize,
    scale: ConfidenceScale,
    rng: &mut impl Rng,
) -> Result<Vec<ConfidenceSample>> {
    let gt = frame
        .gt_coords
        .as_ref()
        .ok_or_else(|| RelocError::InvalidConfig("training frames need ground-truth coordinates".into()))?;
    if frame.len() < n_k {
        return Err(RelocError::TooFewCorrespondences {
            needed: n_k,
            got: frame.len(),
        });
    }
    Ok(sample(rng, frame.len(), n_k)
        .into_iter()
        .map(|i| ConfidenceSample {
            pixel: frame.pixels[i],
            coord: frame.coords[i],
            target: delta_target(&gt[i], &frame.coords[i], scale),
        })
        .collect())
}

/// Mean of a slice; `None` when empty.
pub(crate) fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn norm() -> Normalization {
        Normalization {
            scene_center: [0.0, 0.0, 0.0],
            half_diameter: 2.0,
            image_width: 64.0,
            image_height: 48.0,
        }
    }

    fn random_points(rng: &mut impl Rng, n: usize) -> (Vec<Pixel>, Vec<ScenePoint>) {
        let pixels = (0..n)
            .map(|_| Pixel::new(rng.gen_range(0.0..64.0), rng.gen_range(0.0..48.0)))
            .collect();
        let coords = (0..n)
            .map(|_| {
                ScenePoint::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                )
            })
            .collect();
        (pixels, coords)
    }

    #[test]
    fn delta_examples() {
        let s = ConfidenceScale::DEFAULT;
        let x = ScenePoint::new(1.0, 2.0, 3.0);
        assert_eq!(delta_target(&x, &x, s), 1.0);
        let off = |e: f64| ScenePoint::new(1.0, 2.0 + e, 3.0);
        assert_abs_diff_eq!(delta_target(&x, &off(0.1), s), 0.75, epsilon = 1e-4);
        assert_abs_diff_eq!(delta_target(&x, &off(0.2), s), 0.5625, epsilon = 1e-4);
        let mut last = 1.0;
        for i in 1..100 {
            let d = delta_target(&x, &off(i as f64 * 0.01), s);
            assert!(d < last && d > 0.0);
            last = d;
        }
    }

    #[test]
    fn solve_scale_examples() {
        assert_abs_diff_eq!(solve_scale(0.1, 0.75), 2.8768, epsilon = 1e-4);
        assert_abs_diff_eq!(solve_scale(1.0, (-1.0f64).exp()), 1.0, epsilon = 1e-15);
        for (t, p) in [(0.1, 0.75), (0.05, 0.5), (2.0, 0.01)] {
            let s = ConfidenceScale::new(solve_scale(t, p)).unwrap();
            let x = ScenePoint::origin();
            let y = ScenePoint::new(0.0, 0.0, t);
            assert_abs_diff_eq!(delta_target(&x, &y, s), p, epsilon = 1e-12);
        }
    }

    #[test]
    fn zeroed_model_predicts_zero() {
        let model = ConfidenceModel::zeroed(norm(), ConfidenceScale::DEFAULT);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, c) = random_points(&mut rng, 20);
        assert!(model.predict(&p, &c).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_errors() {
        let model = ConfidenceModel::new(norm(), ConfidenceScale::DEFAULT, 3);
        assert!(matches!(model.predict(&[], &[]), Err(RelocError::EmptyInput)));
        assert!(matches!(
            model.predict(&[Pixel::new(1.0, 1.0)], &[]),
            Err(RelocError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn outputs_in_range_for_wild_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = ConfidenceModel::new(norm(), ConfidenceScale::DEFAULT, 4);
        let wild: Vec<f64> = model_params(&model)
            .iter()
            .map(|_| rng.gen_range(-50.0..50.0))
            .collect();
        set_model_params(&mut model, &wild).unwrap();
        let (p, c) = random_points(&mut rng, 100);
        for v in model.predict(&p, &c).unwrap() {
            assert!((0.0..1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ConfidenceModel::new(norm(), ConfidenceScale::DEFAULT, 6);
        let (p, c) = random_points(&mut rng, 57);
        let base = model.predict(&p, &c).unwrap();
        let mut perm: Vec<usize> = (0..57).collect();
        perm.shuffle(&mut rng);
        let pp: Vec<Pixel> = perm.iter().map(|&i| p[i]).collect();
        let cc: Vec<ScenePoint> = perm.iter().map(|&i| c[i]).collect();
        let permuted = model.predict(&pp, &cc).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(permuted[k], base[i]);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rlnn");
        let model = ConfidenceModel::new(norm(), ConfidenceScale::DEFAULT, 8);
        model.save(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(ConfidenceModel::load(&path).unwrap(), model);
    }

    #[test]
    fn empty_training_set_rejected() {
        let r = train_confidence(&[], norm(), ConfidenceScale::DEFAULT, &ConfidenceTrainingConfig::default());
        assert!(matches!(r, Err(RelocError::EmptyTrainingSet)));
    }

    #[test]
    fn constant_target_fit() {
        let sample = ConfidenceSample {
            pixel: Pixel::new(10.0, 10.0),
            coord: ScenePoint::new(0.5, 0.5, 0.5),
            target: 1.0,
        };
        let frames = vec![vec![sample; 16]; 4];
        let cfg = ConfidenceTrainingConfig {
            epochs: 400,
            batch_frames: 2,
            learning_rate: 2e-3,
            seed: 1,
        };
        let (model, report) = train_confidence(&frames, norm(), ConfidenceScale::DEFAULT, &cfg).unwrap();
        assert!(report.final_loss() < 1e-3, "loss {}", report.final_loss());
        let out = model.predict(&[sample.pixel], &[sample.coord]).unwrap();
        assert!(out[0] > 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<Vec<ConfidenceSample>> = (0..5)
            .map(|_| {
                let (p, c) = random_points(&mut rng, 12);
                p.into_iter()
                    .zip(c)
                    .map(|(pixel, coord)| ConfidenceSample {
                        pixel,
                        coord,
                        target: if coord.z > 0.0 { 0.9 } else { 0.05 },
                    })
                    .collect()
            })
            .collect();
        let cfg = ConfidenceTrainingConfig {
            epochs: 5,
            batch_frames: 2,
            learning_rate: 1e-3,
            seed: 3,
        };
        let (a, _) = train_confidence(&frames, norm(), ConfidenceScale::DEFAULT, &cfg).unwrap();
        let (b, _) = train_confidence(&frames, norm(), ConfidenceScale::DEFAULT, &cfg).unwrap();
        assert_eq!(model_params(&a), model_params(&b));
    }
}
