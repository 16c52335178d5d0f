//! Confidence-filtered hypothesis sampling, selection and refinement.
//!
//! Every hypothesis draws `n_k` correspondences, keeps the most confident
//! `keep_fraction` of them and solves a pose from the kept set. The
//! hypothesis with the highest mean confidence wins and is refined by
//! repeatedly adding the confident part of fresh random samples to its
//! support and re-solving.

use std::collections::HashSet;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::{delta_target, ConfidenceModel, ConfidenceScale};
use crate::error::{RelocError, Result};
use crate::eval::{inlier_fraction, INLIER_THRESHOLD_M};
use crate::geometry::{CameraIntrinsics, Pixel, Pose, ScenePoint};
use crate::solvers::{kabsch, pnp, Match2D3D, Match3D3D, SolverKind};

/// Correspondences of one query image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub intrinsics: CameraIntrinsics,
    pub pixels: Vec<Pixel>,
    pub coords: Vec<ScenePoint>,
    /// Per-correspondence depth, required for 3D-3D solving.
    pub depths: Option<Vec<f64>>,
    pub gt_coords: Option<Vec<ScenePoint>>,
    pub gt_pose: Option<Pose>,
}

impl Frame {
    pub fn new(
        intrinsics: CameraIntrinsics,
        pixels: Vec<Pixel>,
        coords: Vec<ScenePoint>,
        depths: Option<Vec<f64>>,
        gt_coords: Option<Vec<ScenePoint>>,
        gt_pose: Option<Pose>,
    ) -> Result<Self> {
        let n = pixels.len();
        let mismatch = |len: usize| RelocError::LengthMismatch { left: n, right: len };
        if coords.len() != n {
            return Err(mismatch(coords.len()));
        }
        if let Some(d) = &depths {
            if d.len() != n {
                return Err(mismatch(d.len()));
            }
            if let Some(&bad) = d.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
                return Err(RelocError::NonPositiveDepth(bad));
            }
        }
        if let Some(g) = &gt_coords {
            if g.len() != n {
                return Err(mismatch(g.len()));
            }
        }
        Ok(Frame {
            intrinsics,
            pixels,
            coords,
            depths,
            gt_coords,
            gt_pose,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Fraction of the given correspondences within the inlier threshold.
    pub fn inlier_fraction_of(&self, indices: &[usize]) -> Option<f64> {
        let gt = self.gt_coords.as_ref()?;
        if indices.is_empty() {
            return None;
        }
        let pred: Vec<ScenePoint> = indices.iter().map(|&i| self.coords[i]).collect();
        let truth: Vec<ScenePoint> = indices.iter().map(|&i| gt[i]).collect();
        inlier_fraction(&pred, &truth, INLIER_THRESHOLD_M).ok()
    }
}

/// Anything that can assign a confidence in `[0, 1)` to a set of correspondences.
pub trait ConfidenceSource: Sync {
    fn confidences(&self, frame: &Frame, indices: &[usize]) -> Result<Vec<f64>>;
}

impl ConfidenceSource for ConfidenceModel {
    fn confidences(&self, frame: &Frame, indices: &[usize]) -> Result<Vec<f64>> {
        let pixels: Vec<Pixel> = indices.iter().map(|&i| frame.pixels[i]).collect();
        let coords: Vec<ScenePoint> = indices.iter().map(|&i| frame.coords[i]).collect();
        self.predict(&pixels, &coords)
    }
}

/// The exact target `δ` computed from ground-truth coordinates.
#[derive(Debug, Clone, Copy)]
pub struct OracleConfidence {
    pub scale: ConfidenceScale,
}

impl ConfidenceSource for OracleConfidence {
    fn confidences(&self, frame: &Frame, indices: &[usize]) -> Result<Vec<f64>> {
        let gt = frame.gt_coords.as_ref().ok_or_else(|| {
            RelocError::InvalidConfig("oracle confidence needs ground-truth coordinates".into())
        })?;
        Ok(indices
            .iter()
            .map(|&i| delta_target(&gt[i], &frame.coords[i], self.scale))
            .collect())
    }
}

/// Constant confidence: filtering degenerates to plain random sampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformConfidence;

impl ConfidenceSource for UniformConfidence {
    fn confidences(&self, _frame: &Frame, indices: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![0.5; indices.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// Grow the support with every iteration's confident points.
    Accumulate,
    /// Re-solve on each iteration's confident points alone.
    FreshOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub n_k: usize,
    pub keep_fraction: f64,
    pub h_p: usize,
    pub refine_iters: usize,
    pub solver: SolverKind,
    pub refine_mode: RefineMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_k: 500,
            keep_fraction: 0.10,
            h_p: 256,
            refine_iters: 8,
            solver: SolverKind::Kabsch,
            refine_mode: RefineMode::Accumulate,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn n_best(&self) -> usize {
        ((self.n_k as f64 * self.keep_fraction).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(RelocError::InvalidConfig(format!(
                "keep_fraction must lie in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        if self.h_p == 0 {
            return Err(RelocError::InvalidConfig("h_p must be at least 1".into()));
        }
        if self.n_best() < self.solver.min_points() {
            return Err(RelocError::InvalidConfig(format!(
                "n_k·keep_fraction = {} is below the {:?} minimum of {}",
                self.n_best(),
                self.solver,
                self.solver.min_points()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub pose: Pose,
    /// Correspondence indices the pose was solved from, most confident first.
    pub support: Vec<usize>,
    /// Mean confidence over `support`.
    pub score: f64,
}

/// Rng stream for hypothesis `index`; all streams derive from one seed.
pub fn hypothesis_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

const REFINE_STREAM: u64 = u64::MAX;

/// Solves a pose from the given correspondences.
pub fn solve_pose(frame: &Frame, indices: &[usize], solver: SolverKind) -> Result<Pose> {
    match solver {
        SolverKind::Kabsch => {
            let depths = frame.depths.as_ref().ok_or_else(|| {
                RelocError::InvalidConfig("kabsch solver needs per-correspondence depth".into())
            })?;
            let matches = indices
                .iter()
                .map(|&i| {
                    Ok(Match3D3D {
                        camera_point: frame.intrinsics.backproject(&frame.pixels[i], depths[i])?,
                        scene_point: frame.coords[i],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            kabsch(&matches)
        }
        SolverKind::Pnp => {
            let matches: Vec<Match2D3D> = indices
                .iter()
                .map(|&i| Match2D3D {
                    pixel: frame.pixels[i],
                    scene_point: frame.coords[i],
                })
                .collect();
            pnp(&matches, &frame.intrinsics)
        }
    }
}

/// Draws `n_k` distinct correspondences and keeps the `n_best` most
/// confident ones, ties going to the earlier draw. Returns the kept indices
/// and their confidences.
pub fn confident_sample(
    frame: &Frame,
    source: &dyn ConfidenceSource,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if frame.len() < cfg.n_k {
        return Err(RelocError::TooFewCorrespondences {
            needed: cfg.n_k,
            got: frame.len(),
        });
    }
    let sampled = rand::seq::index::sample(rng, frame.len(), cfg.n_k).into_vec();
    let conf = source.confidences(frame, &sampled)?;
    if conf.len() != sampled.len() {
        return Err(RelocError::LengthMismatch {
            left: sampled.len(),
            right: conf.len(),
        });
    }
    let mut order: Vec<usize> = (0..sampled.len()).collect();
    // stable: equal confidences keep draw order
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
    order.truncate(cfg.n_best());
    Ok((
        order.iter().map(|&k| sampled[k]).collect(),
        order.iter().map(|&k| conf[k]).collect(),
    ))
}

pub fn sample_hypothesis(
    frame: &Frame,
    source: &dyn ConfidenceSource,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Hypothesis> {
    let (support, conf) = confident_sample(frame, source, cfg, rng)?;
    let pose = solve_pose(frame, &support, cfg.solver)
        .map_err(|e| RelocError::FailedHypothesis(Box::new(e)))?;
    let score = conf.iter().sum::<f64>() / conf.len() as f64;
    Ok(Hypothesis {
        pose,
        support,
        score,
    })
}

/// All `h_p` hypotheses in index order. Failed solves stay in the list.
pub fn generate_hypotheses(
    frame: &Frame,
    source: &dyn ConfidenceSource,
    cfg: &PipelineConfig,
) -> Result<Vec<Result<Hypothesis>>> {
    cfg.validate()?;
    if frame.len() < cfg.n_k {
        return Err(RelocError::TooFewCorrespondences {
            needed: cfg.n_k,
            got: frame.len(),
        });
    }
    Ok((0..cfg.h_p)
        .into_par_iter()
        .map(|h| sample_hypothesis(frame, source, cfg, &mut hypothesis_rng(cfg.seed, h as u64)))
        .collect())
}

/// Index of the highest-scoring successful hypothesis, lowest index on ties.
pub fn select_best(hypotheses: &[Result<Hypothesis>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, h) in hypotheses.iter().enumerate() {
        if let Ok(h) = h {
            if best.map_or(true, |(_, s)| h.score > s) {
                best = Some((i, h.score));
            }
        }
    }
    best.map(|(i, _)| i)
}

pub fn best_hypothesis(
    frame: &Frame,
    source: &dyn ConfidenceSource,
    cfg: &PipelineConfig,
) -> Result<Hypothesis> {
    let mut all = generate_hypotheses(frame, source, cfg)?;
    let idx = select_best(&all).ok_or(RelocError::AllHypothesesFailed(cfg.h_p))?;
    all.swap_remove(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    pub support: Vec<usize>,
    /// Kept indices drawn at each iteration, in order.
    pub iteration_kept: Vec<Vec<usize>>,
    /// Set when a re-solve failed and the previous pose was returned.
    pub warning: bool,
}

pub fn refine(
    frame: &Frame,
    source: &dyn ConfidenceSource,
    hyp: &Hypothesis,
    cfg: &PipelineConfig,
) -> Result<Refinement> {
    let mut rng = hypothesis_rng(cfg.seed, REFINE_STREAM);
    let mut support = hyp.support.clone();
    let mut seen: HashSet<usize> = support.iter().copied().collect();
    let mut pose = hyp.pose;
    let mut iteration_kept = Vec::with_capacity(cfg.refine_iters);
    let mut warning = false;
    for iter in 0..cfg.refine_iters {
        let (kept, _) = confident_sample(frame, source, cfg, &mut rng)?;
        let solve_on = match cfg.refine_mode {
            RefineMode::Accumulate => {
                support.extend(kept.iter().copied().filter(|i| seen.insert(*i)));
                support.clone()
            }
            RefineMode::FreshOnly => kept.clone(),
        };
        iteration_kept.push(kept);
        match solve_pose(frame, &solve_on, cfg.solver) {
            Ok(p) => pose = p,
            Err(e) => {
                log::warn!("refinement iteration {iter} failed ({e}); keeping previous pose");
                warning = true;
                break;
            }
        }
    }
    Ok(Refinement {
        pose,
        support,
        iteration_kept,
        warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Score per hypothesis; `None` where the solver failed.
    pub hypothesis_scores: Vec<Option<f64>>,
    pub best_index: usize,
    pub best_score: f64,
    pub support_size: usize,
    pub refine_warning: bool,
    /// Inlier fraction of the selected hypothesis' kept set.
    pub kept_inlier_fraction: Option<f64>,
    /// Inlier fraction of the final refined support.
    pub support_inlier_fraction: Option<f64>,
}

/// Wall-clock seconds per stage. Kept apart from [`Diagnostics`], which is
/// a pure function of the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageTimings {
    pub sampling_s: f64,
    pub refinement_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub pose: Pose,
    pub diagnostics: Diagnostics,
    pub timings: StageTimings,
}

pub fn localize(
    frame: &Frame,
    source: &dyn ConfidenceSource,
    cfg: &PipelineConfig,
) -> Result<Localization> {
    let start = Instant::now();
    let mut all = generate_hypotheses(frame, source, cfg)?;
    let best_index = select_best(&all).ok_or(RelocError::AllHypothesesFailed(cfg.h_p))?;
    let hypothesis_scores = all.iter().map(|h| h.as_ref().ok().map(|h| h.score)).collect();
    let best = all.swap_remove(best_index)?;
    let sampling_s = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let refined = refine(frame, source, &best, cfg)?;
    let refinement_s = start.elapsed().as_secs_f64();

    Ok(Localization {
        pose: refined.pose,
        diagnostics: Diagnostics {
            hypothesis_scores,
            best_index,
            best_score: best.score,
            support_size: refined.support.len(),
            refine_warning: refined.warning,
            kept_inlier_fraction: frame.inlier_fraction_of(&best.support),
            support_inlier_fraction: frame.inlier_fraction_of(&refined.support),
        },
        timings: StageTimings {
            sampling_s,
            refinement_s,
        },
    })
}
