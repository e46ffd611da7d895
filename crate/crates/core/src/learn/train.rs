//! Training data from reference streamlines, and plain SGD on the MLP head.
//!
//! Gradients are summed per fixed chunk of [`CHUNK`] samples (sequentially
//! inside a chunk), the chunk sums are combined by a pairwise tree in chunk
//! order, and the result is divided by the batch size. The chunking never
//! depends on the thread count, so training is bit-reproducible for any
//! `--threads`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{self, round_f32, Trace};
use super::DirectionModel;
use crate::encoder::SubjectFeatures;
use crate::error::{Error, Result};
use crate::geom::{normalize, sub, Vec3};
use crate::phantom::PhantomDataset;
use crate::rng::{self, Domain};
use crate::vmf;
use crate::volume::{Point3, Volume};

/// Samples per gradient partial sum.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Early stop when the loss improved by less than this fraction over
    /// the last `patience` epochs.
    pub min_rel_improvement: f64,
    pub patience: usize,
    /// κ = α·FA² for target augmentation and loss weighting.
    pub alpha: f64,
    pub augment: bool,
    /// Also walk every reference streamline backwards.
    pub include_reversed: bool,
    /// Evenly spaced subset of each bundle's reference streamlines.
    pub streamlines_per_bundle: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4096,
            epochs: 100,
            seed: 0,
            hidden: vec![64, 64],
            min_rel_improvement: 1e-4,
            patience: 5,
            alpha: 1600.0,
            augment: true,
            include_reversed: true,
            streamlines_per_bundle: Some(100),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Schema(m.to_string()));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and >= 0");
        }
        if self.batch_size == 0 || self.patience == 0 {
            return bad("batch_size and patience must be >= 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be finite and > 0");
        }
        if !(self.min_rel_improvement >= 0.0) {
            return bad("min_rel_improvement must be >= 0");
        }
        if self.streamlines_per_bundle == Some(0) {
            return bad("streamlines_per_bundle must be >= 1 when set");
        }
        Ok(())
    }
}

/// Row-major feature matrix with one target and κ per row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub feature_len: usize,
    pub features: Vec<f64>,
    pub targets: Vec<Vec3>,
    pub kappa: Vec<f64>,
}

impl TrainingSet {
    pub fn new(feature_len: usize) -> Self {
        TrainingSet {
            feature_len,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_len..(i + 1) * self.feature_len]
    }

    pub fn append(&mut self, other: TrainingSet) -> Result<()> {
        if other.feature_len != self.feature_len {
            return Err(Error::Shape(
                "training sets differ in feature length".into(),
            ));
        }
        self.features.extend(other.features);
        self.targets.extend(other.targets);
        self.kappa.extend(other.kappa);
        Ok(())
    }
}

fn fa_at(fa: &Volume, p: Point3) -> f64 {
    let mut v = [0.0];
    fa.interp_into(fa.world_to_voxel(p), &mut v);
    v[0].clamp(0.0, 1.0)
}

/// Samples along one reference streamline: at point `i` the history is
/// `[a0, a0, a1, …, a(i-1)]` and the target `a(i)`, where `a(k)` is step `k`
/// (augmented with a vMF draw of κ = α·FA(p_k)² when enabled).
pub fn streamline_samples(
    subject: &SubjectFeatures,
    fa: &Volume,
    points: &[Point3],
    cfg: &TrainConfig,
    rng: &mut rng::Stream,
) -> TrainingSet {
    let mut set = TrainingSet::new(subject.cfg.feature_len());
    if points.len() < 2 {
        return set;
    }
    let mut history: Vec<Vec3> = Vec::with_capacity(points.len());
    let mut buf = Vec::new();
    for i in 0..points.len() - 1 {
        let Some(u) = normalize(sub(points[i + 1], points[i])) else {
            continue;
        };
        let kappa = vmf::kappa_from_fa(fa_at(fa, points[i]), cfg.alpha);
        let target = if cfg.augment {
            vmf::augment_target(u, kappa, rng)
        } else {
            u
        };
        if history.is_empty() {
            history.push(target);
        }
        subject.assemble(points[i], &history, &mut buf);
        set.features.extend_from_slice(&buf);
        set.targets.push(target);
        set.kappa.push(kappa);
        history.push(target);
    }
    set
}

/// Evenly spaced indices `⌊(j·n + ⌊k/2⌋)/k⌋`, `j < k`.
pub fn spread_indices(n: usize, k: Option<usize>) -> Vec<usize> {
    match k {
        Some(k) if k < n => (0..k).map(|j| (j * n + k / 2) / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Training samples from every bundle's reference streamlines of one
/// phantom. `subject_id` keys the augmentation streams.
pub fn build_training_set(
    data: &PhantomDataset,
    subject: &SubjectFeatures,
    cfg: &TrainConfig,
    subject_id: u64,
) -> Result<TrainingSet> {
    cfg.validate()?;
    let mut jobs: Vec<(usize, usize, bool)> = Vec::new();
    for (b, bundle) in data.bundles.iter().enumerate() {
        for i in spread_indices(bundle.streamlines.len(), cfg.streamlines_per_bundle) {
            jobs.push((b, i, false));
            if cfg.include_reversed {
                jobs.push((b, i, true));
            }
        }
    }
    let parts: Vec<TrainingSet> = jobs
        .par_iter()
        .map(|&(b, i, rev)| {
            let mut pts = data.bundles[b].streamlines[i].clone();
            if rev {
                pts.reverse();
            }
            let mut r = rng::stream(
                cfg.seed,
                Domain::Augment,
                &[subject_id, b as u64, i as u64, u64::from(rev)],
            );
            streamline_samples(subject, &data.fa, &pts, cfg, &mut r)
        })
        .collect();
    let mut set = TrainingSet::new(subject.cfg.feature_len());
    for p in parts {
        set.append(p)?;
    }
    Ok(set)
}

impl DirectionModel {
    /// Per-feature mean and inverse standard deviation of the training
    /// inputs; constant features get scale 1.
    pub fn fit_standardization(&mut self, data: &TrainingSet) -> Result<()> {
        let f = data.feature_len;
        if f != self.head.input_len() {
            return Err(Error::Shape(
                "training set feature length does not match the model".into(),
            ));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let n = data.len() as f64;
        let mut mean = vec![0.0; f];
        for i in 0..data.len() {
            mean.iter_mut().zip(data.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        for i in 0..data.len() {
            var.iter_mut()
                .zip(data.row(i).iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        self.input_shift = mean.iter().map(|&m| m as f32).collect();
        self.input_scale = var
            .iter()
            .map(|&s| {
                let sd = (s / n).sqrt();
                if sd > 1e-8 {
                    (1.0 / sd) as f32
                } else {
                    1.0
                }
            })
            .collect();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean `-κ⟨û, t⟩`.
    pub loss: f64,
    /// `loss - mean log C(κ)`: the vMF negative log-likelihood.
    pub nll: f64,
    pub mean_cos: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,nll,mean_cos\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.loss, e.nll, e.mean_cos);
        }
        s
    }
}

/// Pairwise sum of equally long vectors, in order.
fn pairwise_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

struct ChunkSum {
    loss: f64,
    cos: f64,
    grad: Vec<f64>,
}

fn chunk_sum(model: &DirectionModel, data: &TrainingSet, idx: &[usize]) -> ChunkSum {
    let m = &model.head;
    let mut grad = vec![0.0; m.params.len()];
    let (mut loss, mut cos) = (0.0, 0.0);
    let mut x = Vec::with_capacity(data.feature_len);
    let mut trace = Trace::default();
    for &i in idx {
        model.standardize(data.row(i), &mut x);
        let z = m.forward(&x, &mut trace);
        let (l, dz) = mlp::loss_and_dz(z, data.targets[i], data.kappa[i]);
        loss += l;
        if let Some(u) = mlp::normalize_output(z) {
            cos +=
                u[0] * data.targets[i][0] + u[1] * data.targets[i][1] + u[2] * data.targets[i][2];
        }
        m.backward(&trace, dz, &mut grad);
    }
    ChunkSum { loss, cos, grad }
}

/// Plain SGD on the head. Encoders and standardisation stay fixed.
pub fn train(
    model: &mut DirectionModel,
    data: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    cfg.validate()?;
    model.validate()?;
    if data.feature_len != model.head.input_len() {
        return Err(Error::Shape(
            "training set feature length does not match the model".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mean_log_c = data.kappa.iter().map(|&k| vmf::log_c(k)).sum::<f64>() / data.len() as f64;
    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, Domain::Shuffle, &[epoch as u64]));
        let (mut loss, mut cos) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let sums: Vec<ChunkSum> = batch
                .par_chunks(CHUNK)
                .map(|c| chunk_sum(model, data, c))
                .collect();
            loss += sums.iter().map(|s| s.loss).sum::<f64>();
            cos += sums.iter().map(|s| s.cos).sum::<f64>();
            let mut g = pairwise_sum(sums.into_iter().map(|s| s.grad).collect());
            let inv = 1.0 / batch.len() as f64;
            g.iter_mut().for_each(|v| *v *= inv);
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of head parameter {k} at epoch {epoch}"
                )));
            }
            for (p, gv) in model.head.params.iter_mut().zip(&g) {
                *p = round_f32(*p - cfg.lr * gv);
            }
        }
        let n = data.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: loss / n,
            nll: loss / n - mean_log_c,
            mean_cos: cos / n,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} mean cos {:.5}",
            stats.loss,
            stats.mean_cos
        );
        curve.epochs.push(stats);
        let e = &curve.epochs;
        if e.len() > cfg.patience {
            let old = e[e.len() - 1 - cfg.patience].loss;
            let new = e[e.len() - 1].loss;
            if (old - new) / old.abs().max(1e-300) < cfg.min_rel_improvement {
                curve.stopped_early = true;
                break;
            }
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{angle, dot};

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let parts: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        assert_eq!(pairwise_sum(parts), vec![21.0, 42.0]);
        assert!(pairwise_sum(Vec::new()).is_empty());
    }

    #[test]
    fn spread_indices_cover_range() {
        assert_eq!(spread_indices(10, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(spread_indices(3, Some(5)), vec![0, 1, 2]);
        assert_eq!(spread_indices(4, None), vec![0, 1, 2, 3]);
    }

    #[test]
    fn augmented_mean_stays_on_tangent() {
        let t = normalize([0.2, 0.9, -0.3]).unwrap();
        let mut r = rng::stream(1, Domain::Test, &[]);
        let mut s = [0.0; 3];
        for _ in 0..10_000 {
            let a = vmf::augment_target(t, 64.0, &mut r);
            s = [s[0] + a[0], s[1] + a[1], s[2] + a[2]];
        }
        let m = normalize(s).unwrap();
        assert!(angle(m, t).to_degrees() < 2.0);
        assert!(dot(m, t) > 0.99);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            alpha: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            hidden: vec![4, 0],
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let c = LossCurve {
            epochs: vec![EpochStats {
                epoch: 0,
                loss: -1.5,
                nll: 0.5,
                mean_cos: 0.9,
            }],
            stopped_early: false,
        };
        assert_eq!(c.to_csv(), "epoch,loss,nll,mean_cos\n0,-1.5,0.5,0.9\n");
    }
}
