//! The learned direction model: frozen random encoders feeding a trainable
//! MLP head whose output is normalised to a unit direction.

pub mod checkpoint;
pub mod mlp;
pub mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use mlp::{grad_check, loss, Batch, GradCheckReport, Mlp};
pub use train::{build_training_set, train, LossCurve, TrainConfig, TrainingSet};

pub use crate::encoder::{Encoders, FeatureConfig, SubjectFeatures};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::rng::{self, Domain};
use crate::tracker::{Prediction, Predictor, StepContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionModel {
    pub features: FeatureConfig,
    pub encoders: Encoders,
    /// Per-feature standardisation `x' = (x - shift) * scale`.
    pub input_shift: Vec<f32>,
    pub input_scale: Vec<f32>,
    pub head: Mlp,
}

/// Result of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Output {
    pub dir: Vec3,
    /// The network produced a zero vector and `dir` is the previous direction.
    pub passthrough: bool,
}

impl DirectionModel {
    /// Random encoders and head; identity standardisation.
    pub fn new(features: FeatureConfig, hidden: &[usize], seed: u64) -> Result<Self> {
        let encoders = Encoders::random(&features)?;
        let n = features.feature_len();
        let sizes: Vec<usize> = std::iter::once(n)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(3))
            .collect();
        let head = Mlp::random(&sizes, &mut rng::stream(seed, Domain::Init, &[200]))?;
        Ok(DirectionModel {
            features,
            encoders,
            input_shift: vec![0.0; n],
            input_scale: vec![1.0; n],
            head,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.encoders.check(&self.features)?;
        self.head.validate()?;
        let n = self.features.feature_len();
        if self.head.input_len() != n || self.input_shift.len() != n || self.input_scale.len() != n
        {
            return Err(Error::Checkpoint(format!(
                "head input {} / standardisation {} do not match feature length {n}",
                self.head.input_len(),
                self.input_shift.len()
            )));
        }
        Ok(())
    }

    pub fn standardize(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            x.iter()
                .zip(self.input_shift.iter().zip(&self.input_scale))
                .map(|(v, (s, k))| (v - *s as f64) * *k as f64),
        );
    }

    /// Predicted unit direction for raw (unstandardised) features.
    pub fn forward(&self, features: &[f64], prev: Vec3) -> Output {
        let mut x = Vec::with_capacity(features.len());
        self.standardize(features, &mut x);
        let z = self.head.forward(&x, &mut mlp::Trace::default());
        match mlp::normalize_output(z) {
            Some(dir) => Output {
                dir,
                passthrough: false,
            },
            None => Output {
                dir: prev,
                passthrough: true,
            },
        }
    }
}

/// The trained model bound to one subject's feature volumes.
pub struct LearnedPredictor<'a> {
    pub model: &'a DirectionModel,
    pub subject: &'a SubjectFeatures,
}

impl<'a> LearnedPredictor<'a> {
    pub fn new(model: &'a DirectionModel, subject: &'a SubjectFeatures) -> Result<Self> {
        if model.features != subject.cfg {
            return Err(Error::Checkpoint(
                "subject features were computed with a different feature config".into(),
            ));
        }
        Ok(LearnedPredictor { model, subject })
    }
}

impl Predictor for LearnedPredictor<'_> {
    fn predict(&self, ctx: &StepContext) -> Prediction {
        let mut f = Vec::with_capacity(self.model.head.input_len());
        self.subject.assemble(ctx.point, ctx.history, &mut f);
        if f.iter().any(|v| !v.is_finite()) {
            return Prediction::Fail("non-finite features".into());
        }
        let out = self.model.forward(&f, ctx.last_dir());
        if out.passthrough {
            log::debug!(
                "zero network output at {:?}; keeping previous direction",
                ctx.point
            );
        }
        Prediction::Direction(out.dir)
    }
}

#[cfg(test)]
mod tests;
