//! Pipeline properties measured on rendered synthetic suites.

use std::sync::OnceLock;

use reloc_core::confidence::ConfidenceScale;
use reloc_core::eval::lower_median;
use reloc_core::geometry::{rotation_error_deg, translation_error_m};
use reloc_core::pipeline::{
    confident_sample, generate_hypotheses, hypothesis_rng, localize, refine, select_best, Frame,
    OracleConfidence, PipelineConfig, UniformConfidence,
};
use reloc_core::solvers::SolverKind;
use reloc_core::synth::{
    default_intrinsics, generate_scene, generate_trajectory, render_suite, NoiseSpec, SceneSpec, SyntheticFrame,
};

fn render(n: usize, trajectory_seed: u64, noise: &NoiseSpec) -> Vec<Frame> {
    let scene = generate_scene(&SceneSpec::default()).unwrap();
    let k = default_intrinsics();
    let poses = generate_trajectory(&scene, &k, n, trajectory_seed).unwrap();
    render_suite(&scene, &poses, &k, noise, trajectory_seed + 1)
        .unwrap()
        .iter()
        .map(SyntheticFrame::to_frame)
        .collect()
}

fn noisy_suite() -> &'static [Frame] {
    static SUITE: OnceLock<Vec<Frame>> = OnceLock::new();
    SUITE.get_or_init(|| render(100, 21, &NoiseSpec::default()))
}

fn oracle() -> OracleConfidence {
    OracleConfidence {
        scale: ConfidenceScale::DEFAULT,
    }
}

#[test]
fn selected_hypothesis_beats_median_hypothesis() {
    let cfg = PipelineConfig::default();
    let mut worse = Vec::new();
    for (i, f) in noisy_suite()[..50].iter().enumerate() {
        let gt = f.gt_pose.unwrap();
        let all = generate_hypotheses(f, &oracle(), &cfg).unwrap();
        let errors: Vec<f64> = all
            .iter()
            .filter_map(|h| h.as_ref().ok())
            .map(|h| translation_error_m(&h.pose, &gt))
            .collect();
        let best = all[select_best(&all).unwrap()].as_ref().unwrap();
        let best_error = translation_error_m(&best.pose, &gt);
        if best_error > lower_median(&errors).unwrap() {
            worse.push(i);
        }
    }
    assert!(worse.is_empty(), "selection worse than the median hypothesis on frames {worse:?}");
}

#[test]
fn refinement_does_not_raise_median_translation_error() {
    let cfg = PipelineConfig::default();
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for f in noisy_suite() {
        let gt = f.gt_pose.unwrap();
        let all = generate_hypotheses(f, &oracle(), &cfg).unwrap();
        let best = all[select_best(&all).unwrap()].as_ref().unwrap();
        let refined = refine(f, &oracle(), best, &cfg).unwrap();
        before.push(translation_error_m(&best.pose, &gt));
        after.push(translation_error_m(&refined.pose, &gt));
    }
    let (b, a) = (lower_median(&before).unwrap(), lower_median(&after).unwrap());
    assert!(a <= b, "median translation error {a} after refinement, {b} before");
}

#[test]
fn oracle_filtering_does_not_lower_inlier_fraction() {
    let cfg = PipelineConfig::default();
    let everything = PipelineConfig {
        keep_fraction: 1.0,
        ..cfg
    };
    let frames = noisy_suite();
    let (mut kept, mut raw) = (0.0, 0.0);
    let draws = 100;
    for d in 0..draws {
        let f = &frames[d % frames.len()];
        let (k, _) = confident_sample(f, &oracle(), &cfg, &mut hypothesis_rng(3, d as u64)).unwrap();
        // same stream, so the same n_k draw before filtering
        let (s, _) = confident_sample(f, &UniformConfidence, &everything, &mut hypothesis_rng(3, d as u64)).unwrap();
        kept += f.inlier_fraction_of(&k).unwrap();
        raw += f.inlier_fraction_of(&s).unwrap();
    }
    let (kept, raw) = (kept / draws as f64, raw / draws as f64);
    assert!(kept >= raw - 0.02, "kept {kept}, raw {raw}");
}

#[test]
fn noise_free_frames_localize_exactly_with_pnp() {
    let frames = render(5, 31, &NoiseSpec::noise_free());
    let cfg = PipelineConfig {
        h_p: 8,
        refine_iters: 2,
        solver: SolverKind::Pnp,
        ..PipelineConfig::default()
    };
    for f in &frames {
        let gt = f.gt_pose.unwrap();
        let pose = localize(f, &UniformConfidence, &cfg).unwrap().pose;
        assert!(rotation_error_deg(&pose, &gt) < 1e-3);
        assert!(translation_error_m(&pose, &gt) < 1e-4);
    }
}

#[test]
fn oracle_pipeline_is_accurate_and_deterministic_on_noisy_frames() {
    let cfg = PipelineConfig {
        h_p: 64,
        ..PipelineConfig::default()
    };
    let frames = &noisy_suite()[..10];
    let (mut rot, mut trans) = (Vec::new(), Vec::new());
    for f in frames {
        let a = localize(f, &oracle(), &cfg).unwrap();
        let b = localize(f, &oracle(), &cfg).unwrap();
        assert_eq!(a.pose, b.pose);
        assert_eq!(a.diagnostics, b.diagnostics);
        let gt = f.gt_pose.unwrap();
        rot.push(rotation_error_deg(&a.pose, &gt));
        trans.push(translation_error_m(&a.pose, &gt));
    }
    assert!(lower_median(&rot).unwrap() < 5.0);
    assert!(lower_median(&trans).unwrap() < 0.05);
}
