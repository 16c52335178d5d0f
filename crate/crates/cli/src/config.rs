use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use reloc_core::confidence::{ConfidenceScale, ConfidenceTrainingConfig};
use reloc_core::dataset::PoseConvention;
use reloc_core::geometry::CameraIntrinsics;
use reloc_core::pipeline::PipelineConfig;
use reloc_core::synth::{default_intrinsics, NoiseSpec, SceneSpec};
use reloc_core::RelocError;

/// Which confidence values drive `localize`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceChoice {
    #[default]
    Model,
    Oracle,
    Uniform,
}

/// Everything a run needs. The top-level `seed` is the only source of
/// randomness; seeds nested inside sub-sections are overwritten with
/// values derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub noise: NoiseSpec,
    pub intrinsics: CameraIntrinsics,
    pub n_frames: usize,
    pub pipeline: PipelineConfig,
    pub training: ConfidenceTrainingConfig,
    /// Labelled point sets drawn per training frame.
    pub samples_per_frame: usize,
    /// Trailing fraction of frames held out when training confidence.
    pub holdout_fraction: f64,
    pub scale: f64,
    pub confidence: ConfidenceChoice,
    pub hypothesis_counts: Vec<usize>,
    pub pose_convention: PoseConvention,
    /// Dataset directory, relative to the config file.
    pub dataset: Option<PathBuf>,
    /// Confidence model file, relative to the config file.
    pub model: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scene: SceneSpec::default(),
            noise: NoiseSpec::default(),
            intrinsics: default_intrinsics(),
            n_frames: 50,
            pipeline: PipelineConfig::default(),
            training: ConfidenceTrainingConfig::default(),
            samples_per_frame: 5,
            holdout_fraction: 0.2,
            scale: ConfidenceScale::DEFAULT.value(),
            confidence: ConfidenceChoice::Model,
            hypothesis_counts: vec![1, 256],
            pose_convention: PoseConvention::CameraToWorld,
            dataset: None,
            model: None,
        }
    }
}

/// Independent child seeds of the run seed.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const SCENE_STREAM: u64 = 1;
pub const TRAJECTORY_STREAM: u64 = 2;
pub const RENDER_STREAM: u64 = 3;
pub const TRAINING_STREAM: u64 = 4;
pub const SAMPLES_STREAM: u64 = 5;
pub const PIPELINE_STREAM: u64 = 6;
pub const SCORING_STREAM: u64 = 7;

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> anyhow::Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RelocError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| RelocError::InvalidConfig(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        cfg.apply_seed();
        cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    fn apply_seed(&mut self) {
        self.scene.seed = derive_seed(self.seed, SCENE_STREAM);
        self.training.seed = derive_seed(self.seed, TRAINING_STREAM);
        self.pipeline.seed = derive_seed(self.seed, PIPELINE_STREAM);
    }

    pub fn validate(&self) -> reloc_core::Result<()> {
        self.scene.validate()?;
        self.noise.validate()?;
        self.intrinsics.validate()?;
        self.pipeline.validate()?;
        ConfidenceScale::new(self.scale)?;
        if self.n_frames == 0 {
            return Err(RelocError::InvalidConfig("n_frames must be at least 1".into()));
        }
        if self.samples_per_frame == 0 {
            return Err(RelocError::InvalidConfig("samples_per_frame must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(RelocError::InvalidConfig("holdout_fraction must lie in [0, 1)".into()));
        }
        if self.hypothesis_counts.is_empty() || self.hypothesis_counts.contains(&0) {
            return Err(RelocError::InvalidConfig(
                "hypothesis_counts must list positive counts".into(),
            ));
        }
        if self.training.epochs == 0 || self.training.batch_frames == 0 {
            return Err(RelocError::InvalidConfig("training needs epochs and batch_frames".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> ConfidenceScale {
        ConfidenceScale::new(self.scale).expect("validated")
    }
}

pub fn resolve(base: &Path, path: &Option<PathBuf>, what: &str) -> reloc_core::Result<PathBuf> {
    let p = path
        .as_ref()
        .ok_or_else(|| RelocError::InvalidConfig(format!("config has no `{what}` path")))?;
    Ok(if p.is_absolute() { p.clone() } else { base.join(p) })
}
