use super::*;
use crate::fixel::{build_fixels, FixelConfig};
use crate::geom::axis_angle;
use crate::phantom::{generate, PhantomSpec};
use crate::tracker::{propagate, TrackerConfig, TrackingVolumes};

fn phantom(name: &str, seed: u64) -> crate::phantom::PhantomDataset {
    generate(&PhantomSpec::preset(name, [32; 3], seed).unwrap()).unwrap()
}

fn subject(d: &crate::phantom::PhantomDataset, model: &DirectionModel) -> SubjectFeatures {
    let fx = build_fixels(d.all_streamlines(), &d.grid, &FixelConfig::default()).unwrap();
    SubjectFeatures::compute(
        &model.features,
        &model.encoders,
        &d.odf,
        &d.labels,
        &fx,
        &d.keypoints,
    )
    .unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 256,
        lr: 0.01,
        hidden: vec![16],
        streamlines_per_bundle: Some(6),
        ..TrainConfig::default()
    }
}

#[test]
fn unaugmented_straight_targets_equal_tangent() {
    let d = phantom("straight", 1);
    let model = DirectionModel::new(FeatureConfig::default(), &[8], 0).unwrap();
    let s = subject(&d, &model);
    let cfg = TrainConfig {
        augment: false,
        include_reversed: false,
        streamlines_per_bundle: Some(5),
        ..TrainConfig::default()
    };
    let set = build_training_set(&d, &s, &cfg, 0).unwrap();
    assert!(set
        .targets
        .iter()
        .all(|t| axis_angle(*t, [1.0, 0.0, 0.0]) < 1e-9));
    let picked = train::spread_indices(d.bundles[0].streamlines.len(), Some(5));
    let steps: usize = picked
        .iter()
        .map(|&i| d.bundles[0].streamlines[i].len() - 1)
        .sum();
    assert_eq!(set.len(), steps);
    assert_eq!(set.features.len(), steps * model.features.feature_len());
    let both = build_training_set(
        &d,
        &s,
        &TrainConfig {
            include_reversed: true,
            ..cfg
        },
        0,
    )
    .unwrap();
    assert_eq!(both.len(), 2 * steps);
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let d = phantom("curved", 2);
    let mut model = DirectionModel::new(FeatureConfig::default(), &[16], 1).unwrap();
    let s = subject(&d, &model);
    let cfg = small_cfg();
    let set = build_training_set(&d, &s, &cfg, 0).unwrap();
    model.fit_standardization(&set).unwrap();
    let start = model.clone();
    let curve = train(&mut model, &set, &cfg).unwrap();
    assert!(
        curve.epochs.last().unwrap().loss < curve.epochs[0].loss,
        "{curve:?}"
    );

    let pool = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
    };
    let mut again = start.clone();
    pool(3).install(|| train(&mut again, &set, &cfg)).unwrap();
    let a = checkpoint::encode_checkpoint(&model, serde_json::Value::Null).unwrap();
    let b = checkpoint::encode_checkpoint(&again, serde_json::Value::Null).unwrap();
    assert_eq!(a, b);

    let mut frozen = start.clone();
    train(&mut frozen, &set, &TrainConfig { lr: 0.0, ..cfg }).unwrap();
    assert_eq!(
        frozen
            .head
            .params
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>(),
        start
            .head
            .params
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    );
}

#[test]
fn learned_predictor_tracks() {
    let d = phantom("straight", 3);
    let mut model = DirectionModel::new(FeatureConfig::default(), &[16], 1).unwrap();
    let s = subject(&d, &model);
    let cfg = TrainConfig {
        epochs: 30,
        ..small_cfg()
    };
    let set = build_training_set(&d, &s, &cfg, 0).unwrap();
    model.fit_standardization(&set).unwrap();
    let _curve = train(&mut model, &set, &cfg).unwrap();
    let p = LearnedPredictor::new(&model, &s).unwrap();
    let vols = TrackingVolumes::new(d.labels.clone(), d.fa.clone()).unwrap();
    let tcfg = TrackerConfig::default();
    let start = d.bundles[0].streamlines[0][0];
    let mut r = crate::rng::tracking_stream(0, 0, 0, 0);
    let (pts, status) = propagate(start, [1.0, 0.0, 0.0], &p, &vols, &tcfg, 6400.0, &mut r);
    assert!(pts.len() > 5);
    assert_eq!(
        status,
        crate::tracker::Status::Accepted,
        "{} points",
        pts.len()
    );
}

#[test]
fn forward_passthrough_on_zero_output() {
    let mut model = DirectionModel::new(FeatureConfig::default(), &[4], 0).unwrap();
    model.head.params.iter_mut().for_each(|p| *p = 0.0);
    let x = vec![0.5; model.features.feature_len()];
    let out = model.forward(&x, [0.0, 0.0, 1.0]);
    assert!(out.passthrough);
    assert_eq!(out.dir, [0.0, 0.0, 1.0]);
}
