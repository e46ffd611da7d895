//! End-to-end orchestration shared by the command line, the C interface and
//! the integration tests: population fixel atlases, training on a set of
//! phantoms, whole-brain tracking with either predictor, and evaluation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureConfig, SubjectFeatures};
use crate::error::{Error, Result};
use crate::evalmod::{evaluate, EvalReport, MaskRule};
use crate::fixel::{build_fixels, FixelConfig, FixelMap};
use crate::geom::Vec3;
use crate::learn::{
    build_training_set, grad_check, train, Batch, DirectionModel, GradCheckReport,
    LearnedPredictor, LossCurve, Mlp, TrainConfig, TrainingSet,
};
use crate::phantom::{PhantomDataset, PhantomSpec};
use crate::rng::{self, Domain};
use crate::tracker::{
    enumerate_seeds, track_whole_brain, FactPredictor, TrackerConfig, TrackingVolumes, Tractogram,
};
use crate::vmf;

/// Every tunable of a run in one JSON document. Missing sections take their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub features: FeatureConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub fixel: FixelConfig,
    pub eval: MaskRule,
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_slice(bytes).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validates every section except the phantom, which only matters to
    /// phantom generation and is checked there.
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.tracker.validate()?;
        self.train.validate()?;
        self.fixel.validate()?;
        if !(0.0..=100.0).contains(&self.eval.percentile) {
            return Err(Error::Schema(format!(
                "eval percentile must be in [0, 100], got {}",
                self.eval.percentile
            )));
        }
        Ok(())
    }
}

/// Fixel map built from the union of the reference streamlines of several
/// phantoms sharing one grid.
pub fn population_atlas(datasets: &[&PhantomDataset], cfg: &FixelConfig) -> Result<FixelMap> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::InvalidArgument("atlas needs at least one phantom".into()))?;
    if datasets.iter().any(|d| !d.grid.same_lattice(&first.grid)) {
        return Err(Error::Shape("atlas phantoms must share one grid".into()));
    }
    build_fixels(
        datasets.iter().flat_map(|d| d.all_streamlines()),
        &first.grid,
        cfg,
    )
}

pub fn subject_features(
    model: &DirectionModel,
    data: &PhantomDataset,
    atlas: &FixelMap,
) -> Result<SubjectFeatures> {
    SubjectFeatures::compute(
        &model.features,
        &model.encoders,
        &data.odf,
        &data.labels,
        atlas,
        &data.keypoints,
    )
}

/// Builds a fresh model, pools training samples from every phantom, fits the
/// input standardisation and trains the head.
pub fn train_model(
    datasets: &[&PhantomDataset],
    atlas: &FixelMap,
    features: &FeatureConfig,
    cfg: &TrainConfig,
) -> Result<(DirectionModel, LossCurve)> {
    cfg.validate()?;
    let mut model = DirectionModel::new(features.clone(), &cfg.hidden, cfg.seed)?;
    let mut set = TrainingSet::new(features.feature_len());
    for (i, d) in datasets.iter().enumerate() {
        let subject = subject_features(&model, d, atlas)?;
        set.append(build_training_set(d, &subject, cfg, i as u64)?)?;
    }
    log::info!(
        "training on {} samples from {} phantoms",
        set.len(),
        datasets.len()
    );
    model.fit_standardization(&set)?;
    let curve = train(&mut model, &set, cfg)?;
    Ok((model, curve))
}

fn volumes(data: &PhantomDataset) -> Result<TrackingVolumes> {
    TrackingVolumes::new(data.labels.clone(), data.fa.clone())
}

pub fn track_learned(
    model: &DirectionModel,
    data: &PhantomDataset,
    atlas: &FixelMap,
    cfg: &TrackerConfig,
) -> Result<Tractogram> {
    let subject = subject_features(model, data, atlas)?;
    let predictor = LearnedPredictor::new(model, &subject)?;
    track_whole_brain(
        &enumerate_seeds(&data.labels),
        &predictor,
        &volumes(data)?,
        cfg,
    )
}

pub fn track_fact(data: &PhantomDataset, cfg: &TrackerConfig) -> Result<Tractogram> {
    let predictor = FactPredictor::new(&data.grid, &data.tensors, cfg)?;
    track_whole_brain(
        &enumerate_seeds(&data.labels),
        &predictor,
        &volumes(data)?,
        cfg,
    )
}

pub fn evaluate_tractogram(
    t: &Tractogram,
    data: &PhantomDataset,
    rule: &MaskRule,
) -> Result<EvalReport> {
    evaluate(
        &t.accepted_points(),
        &data.grid,
        &data.regions(),
        rule,
        Some(t.report.clone()),
    )
}

/// Gradient check of `head` on a random batch: standard-normal inputs,
/// uniform unit targets and κ drawn from [4, 100].
pub fn grad_check_random_batch(
    head: &Mlp,
    n_samples: usize,
    eps: f64,
    max_weights: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut r = rng::stream(seed, Domain::Init, &[300]);
    let f = head.input_len();
    let inputs: Vec<f64> = (0..n_samples * f)
        .map(|_| r.sample(StandardNormal))
        .collect();
    let targets: Vec<Vec3> = (0..n_samples)
        .map(|_| vmf::sample([0.0, 0.0, 1.0], 0.0, &mut r))
        .collect();
    let kappa: Vec<f64> = (0..n_samples).map(|_| r.gen_range(4.0..=100.0)).collect();
    grad_check(
        head,
        &Batch {
            inputs: &inputs,
            targets: &targets,
            kappa: &kappa,
        },
        eps,
        max_weights,
        &mut r,
    )
}
