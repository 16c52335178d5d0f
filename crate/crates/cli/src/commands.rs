use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use reloc_core::confidence::{draw_confidence_samples, train_confidence, ConfidenceModel, Normalization};
use reloc_core::dataset::{read_dataset, validate_dataset, write_dataset, ValidationReport};
use reloc_core::eval::{inlier_fraction, roc, run_ablation, AblationConfig, PoseMetrics, INLIER_THRESHOLD_M};
use reloc_core::geometry::{rotation_error_deg, translation_error_m, ScenePoint};
use reloc_core::pipeline::{
    hypothesis_rng, localize, ConfidenceSource, Frame, OracleConfidence, StageTimings, UniformConfidence,
};
use reloc_core::synth::{generate_scene, generate_trajectory, render_suite, SyntheticFrame};
use reloc_core::RelocError;

use crate::config::{derive_seed, resolve, ConfidenceChoice, RunConfig, RENDER_STREAM, SAMPLES_STREAM, SCORING_STREAM, TRAJECTORY_STREAM};

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| RelocError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| {
        RelocError::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_suite(cfg: &RunConfig, base: &Path) -> anyhow::Result<Vec<SyntheticFrame>> {
    let dir = resolve(base, &cfg.dataset, "dataset")?;
    let ds = read_dataset(&dir, cfg.pose_convention)?;
    Ok(ds.to_synthetic().with_context(|| format!("dataset {}", dir.display()))?)
}

fn raw_inlier_fraction(frames: &[Frame]) -> reloc_core::Result<f64> {
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for f in frames {
        pred.extend_from_slice(&f.coords);
        gt.extend_from_slice(f.gt_coords.as_deref().unwrap_or_default());
    }
    inlier_fraction(&pred, &gt, INLIER_THRESHOLD_M)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let scene = generate_scene(&cfg.scene)?;
    let poses = generate_trajectory(&scene, &cfg.intrinsics, cfg.n_frames, derive_seed(cfg.seed, TRAJECTORY_STREAM))?;
    let frames = render_suite(&scene, &poses, &cfg.intrinsics, &cfg.noise, derive_seed(cfg.seed, RENDER_STREAM))?;
    write_dataset(out, &frames)?;
    let plain: Vec<Frame> = frames.iter().map(SyntheticFrame::to_frame).collect();
    Ok(format!(
        "wrote {} frames to {}\nraw inlier fraction: {:.4}\n",
        frames.len(),
        out.display(),
        raw_inlier_fraction(&plain)?
    ))
}

/// Confidence AUC over one `n_k` draw per frame; `None` when every drawn
/// point is an inlier or every one an outlier.
fn confidence_auc(frames: &[Frame], source: &dyn ConfidenceSource, n_k: usize, seed: u64) -> reloc_core::Result<Option<f64>> {
    let mut conf = Vec::new();
    let mut labels = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let Some(gt) = f.gt_coords.as_ref() else { continue };
        let n = n_k.min(f.len());
        let idx = rand::seq::index::sample(&mut hypothesis_rng(seed, i as u64), f.len(), n).into_vec();
        conf.extend(source.confidences(f, &idx)?);
        labels.extend(idx.iter().map(|&j| (f.coords[j] - gt[j]).norm() < INLIER_THRESHOLD_M));
    }
    match roc(&conf, &labels) {
        Ok(r) => Ok(Some(r.auc)),
        Err(RelocError::DegenerateLabels) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct TrainingSummary<'a> {
    seed: u64,
    training_frames: usize,
    heldout_frames: usize,
    final_loss: f64,
    heldout_auc: Option<f64>,
    epoch_losses: &'a [f64],
}

pub fn train(cfg: &RunConfig, base: &Path, out: &Path) -> anyhow::Result<String> {
    let suite = load_suite(cfg, base)?;
    let frames: Vec<Frame> = suite.iter().map(SyntheticFrame::to_frame).collect();
    let n_hold = if frames.len() > 1 {
        ((frames.len() as f64 * cfg.holdout_fraction).round() as usize).min(frames.len() - 1)
    } else {
        0
    };
    let (train_frames, held) = frames.split_at(frames.len() - n_hold);

    let points: Vec<ScenePoint> = train_frames
        .iter()
        .flat_map(|f| f.gt_coords.clone().unwrap_or_default())
        .collect();
    let normalization = Normalization::from_points(&points, &cfg.intrinsics)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SAMPLES_STREAM));
    let mut sets = Vec::with_capacity(train_frames.len() * cfg.samples_per_frame);
    for f in train_frames {
        for _ in 0..cfg.samples_per_frame {
            sets.push(draw_confidence_samples(f, cfg.pipeline.n_k, cfg.scale(), &mut rng)?);
        }
    }
    let (model, report) = train_confidence(&sets, normalization, cfg.scale(), &cfg.training)?;
    model.save(out)?;
    let eval_frames = if held.is_empty() { train_frames } else { held };
    let auc = confidence_auc(eval_frames, &model, cfg.pipeline.n_k, derive_seed(cfg.seed, SCORING_STREAM))?;
    let summary = TrainingSummary {
        seed: cfg.seed,
        training_frames: train_frames.len(),
        heldout_frames: held.len(),
        final_loss: report.final_loss(),
        heldout_auc: auc,
        epoch_losses: &report.epoch_losses,
    };
    write_json(&with_suffix(out, ".report.json"), &summary)?;
    Ok(format!(
        "model written to {}\nfinal loss: {:.6}\nheld-out AUC: {}\n",
        out.display(),
        report.final_loss(),
        auc.map_or("undefined (single-class labels)".into(), |a| format!("{a:.4}"))
    ))
}

fn confidence_source(cfg: &RunConfig, base: &Path) -> anyhow::Result<Box<dyn ConfidenceSource>> {
    Ok(match cfg.confidence {
        ConfidenceChoice::Model => Box::new(ConfidenceModel::load(&resolve(base, &cfg.model, "model")?)?),
        ConfidenceChoice::Oracle => Box::new(OracleConfidence { scale: cfg.scale() }),
        ConfidenceChoice::Uniform => Box::new(UniformConfidence),
    })
}

#[derive(Serialize)]
struct FrameOutcome {
    frame: usize,
    rotation_deg: f64,
    translation_m: f64,
    kept_inlier_fraction: Option<f64>,
    support_inlier_fraction: Option<f64>,
    best_score: Option<f64>,
    failed: bool,
    #[serde(skip)]
    timings: StageTimings,
}

#[derive(Serialize)]
struct LocalizeSummary<'a> {
    seed: u64,
    frames: usize,
    failures: usize,
    median_rotation_deg: f64,
    median_translation_m: f64,
    accuracy: f64,
    raw_inlier_fraction: f64,
    confidence_auc: Option<f64>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct TimingSummary {
    total_sampling_s: f64,
    total_refinement_s: f64,
    per_frame: Vec<StageTimings>,
}

pub fn localize_cmd(cfg: &RunConfig, base: &Path, out: &Path) -> anyhow::Result<String> {
    let suite = load_suite(cfg, base)?;
    let source = confidence_source(cfg, base)?;
    let frames: Vec<Frame> = suite.iter().map(SyntheticFrame::to_frame).collect();
    let outcomes = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let gt = f.gt_pose.expect("dataset frames carry a pose");
            match localize(f, source.as_ref(), &cfg.pipeline) {
                Ok(loc) => Ok(FrameOutcome {
                    frame: i,
                    rotation_deg: rotation_error_deg(&loc.pose, &gt),
                    translation_m: translation_error_m(&loc.pose, &gt),
                    kept_inlier_fraction: loc.diagnostics.kept_inlier_fraction,
                    support_inlier_fraction: loc.diagnostics.support_inlier_fraction,
                    best_score: Some(loc.diagnostics.best_score),
                    failed: false,
                    timings: loc.timings,
                }),
                Err(RelocError::AllHypothesesFailed(n)) => {
                    log::warn!("frame {i}: all {n} hypotheses failed");
                    Ok(FrameOutcome {
                        frame: i,
                        rotation_deg: reloc_core::eval::FAILED_ROTATION_DEG,
                        translation_m: f64::INFINITY,
                        kept_inlier_fraction: None,
                        support_inlier_fraction: None,
                        best_score: None,
                        failed: true,
                        timings: StageTimings::default(),
                    })
                }
                Err(e) => Err(e),
            }
        })
        .collect::<reloc_core::Result<Vec<_>>>()?;

    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut csv = String::from("frame,rotation_deg,translation_m,kept_inlier_fraction,support_inlier_fraction,best_score,failed\n");
    for o in &outcomes {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            o.frame,
            o.rotation_deg,
            o.translation_m,
            opt(o.kept_inlier_fraction),
            opt(o.support_inlier_fraction),
            opt(o.best_score),
            o.failed
        );
    }
    write_text(out, &csv)?;

    let metrics = PoseMetrics::from_errors(
        outcomes.iter().map(|o| o.rotation_deg).collect(),
        outcomes.iter().map(|o| o.translation_m).collect(),
    )?;
    let auc = confidence_auc(&frames, source.as_ref(), cfg.pipeline.n_k, derive_seed(cfg.seed, SCORING_STREAM))?;
    let summary = LocalizeSummary {
        seed: cfg.seed,
        frames: outcomes.len(),
        failures: outcomes.iter().filter(|o| o.failed).count(),
        median_rotation_deg: metrics.median_rotation_deg,
        median_translation_m: metrics.median_translation_m,
        accuracy: metrics.accuracy,
        raw_inlier_fraction: raw_inlier_fraction(&frames)?,
        confidence_auc: auc,
        config: cfg,
    };
    write_json(&with_suffix(out, ".summary.json"), &summary)?;
    let timings = TimingSummary {
        total_sampling_s: outcomes.iter().map(|o| o.timings.sampling_s).sum(),
        total_refinement_s: outcomes.iter().map(|o| o.timings.refinement_s).sum(),
        per_frame: outcomes.iter().map(|o| o.timings).collect(),
    };
    write_json(&with_suffix(out, ".timings.json"), &timings)?;
    log::info!(
        "sampling {:.3} s, refinement {:.3} s",
        timings.total_sampling_s,
        timings.total_refinement_s
    );
    Ok(format!(
        "{} frames, {} failed\nmedian rotation {:.4} deg, median translation {:.4} m, accuracy {:.3}\n",
        summary.frames,
        summary.failures,
        summary.median_rotation_deg,
        summary.median_translation_m,
        summary.accuracy
    ))
}

pub fn ablate(cfg: &RunConfig, base: &Path, out: &Path) -> anyhow::Result<String> {
    let suite = load_suite(cfg, base)?;
    let model = match &cfg.model {
        Some(_) => Some(ConfidenceModel::load(&resolve(base, &cfg.model, "model")?)?),
        None => None,
    };
    let acfg = AblationConfig {
        pipeline: cfg.pipeline,
        hypothesis_counts: cfg.hypothesis_counts.clone(),
        scale: cfg.scale,
    };
    let report = run_ablation(&suite, model.as_ref(), &acfg)?;
    let table = report.to_table();
    write_text(&with_suffix(out, ".csv"), &report.to_csv())?;
    write_text(&with_suffix(out, ".txt"), &table)?;
    write_json(&with_suffix(out, ".json"), &report)?;
    Ok(table)
}

pub fn validate(cfg: &RunConfig, base: &Path, out: Option<&Path>) -> anyhow::Result<String> {
    let dir = resolve(base, &cfg.dataset, "dataset")?;
    let report: ValidationReport = validate_dataset(&dir)?;
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(format!(
        "{}: {} frames of {}x{}, ground truth within {:e} m of depth and pose\n",
        dir.display(),
        report.frames,
        report.width,
        report.height,
        report.max_ground_truth_deviation
    ))
}
