use nalgebra::{Point2, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reloc_core::confidence::{
    train_confidence, ConfidenceModel, ConfidenceSample, ConfidenceScale, ConfidenceTrainingConfig, Normalization,
};
use reloc_core::eval::roc;

fn normalization() -> Normalization {
    Normalization {
        scene_center: [0.0, 0.0, 1.0],
        half_diameter: 2.0,
        image_width: 64.0,
        image_height: 48.0,
    }
}

/// Inliers near one scene point with target about 0.9, outliers near
/// another with target about 0.05.
fn two_clusters(rng: &mut ChaCha8Rng, n: usize) -> (Vec<ConfidenceSample>, Vec<bool>) {
    let centers = [Vector3::new(-1.0, 0.0, 0.5), Vector3::new(1.0, 0.0, 1.5)];
    (0..n)
        .map(|_| {
            let inlier = rng.gen_bool(0.3);
            let c = centers[usize::from(!inlier)];
            let sample = ConfidenceSample {
                pixel: Point2::new(rng.gen_range(0.0..64.0), rng.gen_range(0.0..48.0)),
                coord: Point3::from(c + Vector3::from_fn(|_, _| rng.gen_range(-0.4..0.4))),
                target: if inlier { 0.9 } else { 0.05 } + rng.gen_range(-0.03..0.03),
            };
            (sample, inlier)
        })
        .unzip()
}

fn config() -> ConfidenceTrainingConfig {
    ConfidenceTrainingConfig {
        epochs: 60,
        batch_frames: 10,
        ..ConfidenceTrainingConfig::default()
    }
}

fn train(seed: u64) -> (ConfidenceModel, Vec<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<_> = (0..40).map(|_| two_clusters(&mut rng, 100).0).collect();
    let (model, report) = train_confidence(&frames, normalization(), ConfidenceScale::DEFAULT, &config()).unwrap();
    (model, report.epoch_losses, rng)
}

#[test]
fn separable_clusters_are_ranked_and_split() {
    let (model, losses, mut rng) = train(1);
    let (mut conf, mut labels) = (Vec::new(), Vec::new());
    for _ in 0..10 {
        let (s, l) = two_clusters(&mut rng, 100);
        let pixels: Vec<_> = s.iter().map(|x| x.pixel).collect();
        let coords: Vec<_> = s.iter().map(|x| x.coord).collect();
        conf.extend(model.predict(&pixels, &coords).unwrap());
        labels.extend(l);
    }
    let auc = roc(&conf, &labels).unwrap().auc;
    assert!(auc > 0.95, "held-out AUC {auc}");

    let mean = |want: bool| {
        let v: Vec<f64> = conf.iter().zip(&labels).filter(|(_, &l)| l == want).map(|(&c, _)| c).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let gap = mean(true) - mean(false);
    assert!(gap >= 0.3, "inlier/outlier confidence gap {gap}");

    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn same_seed_gives_identical_model_files() {
    let dir = tempfile::tempdir().unwrap();
    let paths = [dir.path().join("a.rlnn"), dir.path().join("b.rlnn")];
    for p in &paths {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<_> = (0..6).map(|_| two_clusters(&mut rng, 30).0).collect();
        let cfg = ConfidenceTrainingConfig {
            epochs: 5,
            batch_frames: 3,
            seed: 17,
            ..ConfidenceTrainingConfig::default()
        };
        let (model, _) = train_confidence(&frames, normalization(), ConfidenceScale::DEFAULT, &cfg).unwrap();
        model.save(p).unwrap();
    }
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());
    let json = |p: &std::path::Path| std::fs::read(reloc_core::confidence::sidecar_path(p)).unwrap();
    assert_eq!(json(&paths[0]), json(&paths[1]));
    let loaded = ConfidenceModel::load(&paths[0]).unwrap();
    let out = loaded
        .predict(&[Point2::new(3.0, 4.0)], &[Point3::new(0.0, 0.0, 1.0)])
        .unwrap();
    assert!((0.0..1.0).contains(&out[0]));
}
