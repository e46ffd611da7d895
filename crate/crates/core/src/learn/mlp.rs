//! Fully connected ReLU network with a normalised 3-vector output, its
//! reverse-mode gradient under the weighted cosine loss, and a
//! finite-difference check of that gradient.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Parameters are kept in `f64` but always hold `f32`-representable values
/// outside of finite-difference probing, so a checkpoint stores them exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths including input and the final 3.
    pub sizes: Vec<usize>,
    /// Per layer: weights `[out][in]` row-major, then biases.
    pub params: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `acts[0]` is the input; `acts[l]` the post-ReLU output of layer `l-1`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    /// Sign pattern of every hidden pre-activation.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let n = self.pre.len();
        self.pre[..n.saturating_sub(1)]
            .iter()
            .flatten()
            .map(|&v| v > 0.0)
            .collect()
    }
}

pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Mlp {
    pub fn n_params_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) || *sizes.last().unwrap() != 3 {
            return Err(Error::Shape(format!(
                "MLP sizes must be positive and end in 3, got {sizes:?}"
            )));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; Self::n_params_for(sizes)],
        })
    }

    /// He-uniform weights rounded to `f32`, zero biases.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = (6.0 / w[0] as f64).sqrt();
            for p in &mut m.params[off..off + w[0] * w[1]] {
                *p = round_f32(rng.gen_range(-bound..bound));
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(m)
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    /// `(weight offset, bias offset)` of layer `l`.
    pub fn offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self
            .sizes
            .windows(2)
            .take(l)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    pub fn validate(&self) -> Result<()> {
        let z = Self::zeros(&self.sizes)?;
        if z.params.len() != self.params.len() {
            return Err(Error::Shape(
                "MLP parameter count does not match layer sizes".into(),
            ));
        }
        Ok(())
    }

    /// Pre-normalisation output `z`.
    pub fn forward(&self, x: &[f64], trace: &mut Trace) -> Vec3 {
        debug_assert_eq!(x.len(), self.sizes[0]);
        trace.acts.clear();
        trace.pre.clear();
        trace.acts.push(x.to_vec());
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = self.offsets(l);
            let input = trace.acts.last().unwrap();
            let mut pre = vec![0.0; n_out];
            for (o, dst) in pre.iter_mut().enumerate() {
                let row = &self.params[wo + o * n_in..wo + (o + 1) * n_in];
                *dst = self.params[bo + o] + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
            }
            let act = if l == last {
                pre.clone()
            } else {
                pre.iter().map(|v| v.max(0.0)).collect()
            };
            trace.pre.push(pre);
            trace.acts.push(act);
        }
        let z = trace.acts.last().unwrap();
        [z[0], z[1], z[2]]
    }

    /// Accumulate `∂L/∂θ` into `grad` given `∂L/∂z` for the last forward pass.
    pub fn backward(&self, trace: &Trace, dz: Vec3, grad: &mut [f64]) {
        let mut delta = dz.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = self.offsets(l);
            let input = &trace.acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[bo + o] += d;
                let g = &mut grad[wo + o * n_in..wo + (o + 1) * n_in];
                for (gv, v) in g.iter_mut().zip(input) {
                    *gv += d * v;
                }
            }
            if l == 0 {
                break;
            }
            let mut next = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &self.params[wo + o * n_in..wo + (o + 1) * n_in];
                for (nv, w) in next.iter_mut().zip(row) {
                    *nv += d * w;
                }
            }
            for (nv, p) in next.iter_mut().zip(&trace.pre[l - 1]) {
                if *p <= 0.0 {
                    *nv = 0.0;
                }
            }
            delta = next;
        }
    }
}

/// Unit output direction, `None` when `z` is zero or not finite.
pub fn normalize_output(z: Vec3) -> Option<Vec3> {
    let n = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
    if n > 0.0 && n.is_finite() {
        Some([z[0] / n, z[1] / n, z[2] / n])
    } else {
        None
    }
}

/// Per-sample loss `-κ⟨û, t⟩`.
pub fn loss(u_hat: Vec3, target: Vec3, kappa: f64) -> f64 {
    -kappa * (u_hat[0] * target[0] + u_hat[1] * target[1] + u_hat[2] * target[2])
}

/// Loss of one sample and `∂L/∂z` through `û = z/‖z‖`:
/// `(I - ûûᵀ)(-κt)/‖z‖`. A zero `z` contributes zero loss and gradient.
pub fn loss_and_dz(z: Vec3, target: Vec3, kappa: f64) -> (f64, Vec3) {
    let n = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
    if !(n > 0.0) {
        return (0.0, [0.0; 3]);
    }
    let u = [z[0] / n, z[1] / n, z[2] / n];
    let g = [-kappa * target[0], -kappa * target[1], -kappa * target[2]];
    let ug = u[0] * g[0] + u[1] * g[1] + u[2] * g[2];
    (
        loss(u, target, kappa),
        [
            (g[0] - u[0] * ug) / n,
            (g[1] - u[1] * ug) / n,
            (g[2] - u[2] * ug) / n,
        ],
    )
}

/// Samples for loss evaluation, already in network input space.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<'a> {
    pub inputs: &'a [f64],
    pub targets: &'a [Vec3],
    pub kappa: &'a [f64],
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Mean loss over the batch and (optionally) its gradient, computed as a
/// sequential sum within the batch.
pub fn batch_loss_grad(m: &Mlp, b: &Batch, grad: Option<&mut [f64]>) -> f64 {
    let f = m.input_len();
    let mut trace = Trace::default();
    let inv = 1.0 / b.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for i in 0..b.len() {
        let z = m.forward(&b.inputs[i * f..(i + 1) * f], &mut trace);
        let (l, dz) = loss_and_dz(z, b.targets[i], b.kappa[i]);
        total += l;
        if let Some(g) = grad.as_deref_mut() {
            m.backward(&trace, dz.map(|v| v * inv), g);
        }
    }
    total * inv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes whose ±ε evaluations changed a ReLU sign pattern.
    pub skipped_kinks: usize,
}

/// Central differences on up to `max_weights` randomly chosen parameters.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<R: Rng + ?Sized>(
    m: &Mlp,
    b: &Batch,
    eps: f64,
    max_weights: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    m.validate()?;
    if b.inputs.len() != b.len() * m.input_len() || b.kappa.len() != b.len() {
        return Err(Error::Shape(
            "batch arrays do not match the model input length".into(),
        ));
    }
    let mut analytic = vec![0.0; m.params.len()];
    batch_loss_grad(m, b, Some(&mut analytic));
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let patterns = |m: &Mlp| -> Vec<Vec<bool>> {
        let mut t = Trace::default();
        (0..b.len())
            .map(|i| {
                m.forward(
                    &b.inputs[i * m.input_len()..(i + 1) * m.input_len()],
                    &mut t,
                );
                t.relu_pattern()
            })
            .collect()
    };
    let base = patterns(m);
    let n = max_weights.min(m.params.len());
    let mut idx = sample_indices(rng, m.params.len(), n).into_vec();
    idx.sort_unstable();
    let mut probe = m.clone();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for k in idx {
        let orig = probe.params[k];
        probe.params[k] = orig + eps;
        let (lp, pp) = (batch_loss_grad(&probe, b, None), patterns(&probe));
        probe.params[k] = orig - eps;
        let (lm, pm) = (batch_loss_grad(&probe, b, None), patterns(&probe));
        probe.params[k] = orig;
        if pp != base || pm != base {
            skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
        skipped_kinks: skipped,
    })
}
