//! von Mises–Fisher distribution on the unit sphere S².
//!
//! Density `C(κ) exp(κ μᵀu)` with `C(κ) = κ / (2π (e^κ − e^{−κ}))`. Sampling
//! uses the exact inverse CDF of `w = μᵀu`, so every draw consumes exactly
//! two uniforms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, normalize, orthonormal_basis, scale, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    mu: Vec3,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec3, kappa: f64) -> Result<Self> {
        let n = crate::geom::norm(mu);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "vMF mean direction must be unit, |mu| = {n}"
            )));
        }
        if !(kappa >= 0.0) || kappa.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "vMF concentration must be >= 0, got {kappa}"
            )));
        }
        Ok(VmfParams { mu, kappa })
    }

    pub fn mu(&self) -> Vec3 {
        self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        sample(self.mu, self.kappa, rng)
    }

    pub fn log_density(&self, u: Vec3) -> f64 {
        log_c(self.kappa) + self.kappa * crate::geom::dot(self.mu, u)
    }
}

/// `log C(κ)`, stable for all κ ≥ 0 (and infinite κ gives +∞).
pub fn log_c(kappa: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    if kappa <= 0.0 {
        return -(2.0 * two_pi).ln();
    }
    if kappa > 20.0 {
        // e^κ − e^{−κ} = e^κ (1 − e^{−2κ})
        kappa.ln() - two_pi.ln() - kappa - (-(-2.0 * kappa).exp()).ln_1p()
    } else {
        // e^κ − e^{−κ} = e^{−κ} expm1(2κ)
        kappa.ln() - two_pi.ln() + kappa - (2.0 * kappa).exp_m1().ln()
    }
}

/// Cosine `w = μᵀu` at probability `p` of its CDF.
fn inverse_cdf_cos(kappa: f64, p: f64) -> f64 {
    if kappa <= 0.0 {
        return 2.0 * p - 1.0;
    }
    if kappa.is_infinite() {
        return 1.0;
    }
    // w = 1 + ln(p + (1−p)e^{−2κ})/κ, written with log1p/expm1
    let w = 1.0 + ((1.0 - p) * (-2.0 * kappa).exp_m1()).ln_1p() / kappa;
    w.clamp(-1.0, 1.0)
}

/// One draw from vMF(μ, κ).
pub fn sample<R: Rng + ?Sized>(mu: Vec3, kappa: f64, rng: &mut R) -> Vec3 {
    // ξ ∈ (0, 1] so the logarithm stays finite at huge κ.
    let xi = 1.0 - rng.gen::<f64>();
    let phi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    let w = inverse_cdf_cos(kappa, xi);
    let r = (1.0 - w * w).max(0.0).sqrt();
    let (e1, e2) = orthonormal_basis(mu);
    let v = add(
        scale(mu, w),
        add(scale(e1, r * phi.cos()), scale(e2, r * phi.sin())),
    );
    normalize(v).unwrap_or(mu)
}

/// The `q`-quantile of the angle between a draw and μ, in radians.
pub fn angle_quantile(kappa: f64, q: f64) -> f64 {
    if kappa <= 0.0 {
        return (1.0 - 2.0 * q).clamp(-1.0, 1.0).acos();
    }
    // angle ≤ a  ⇔  w ≥ cos a; P(w ≥ c) = q
    let w = 1.0 + (q * (-2.0 * kappa).exp_m1()).ln_1p() / kappa;
    w.clamp(-1.0, 1.0).acos()
}

/// Mean resultant length `A(κ) = coth κ − 1/κ`.
pub fn mean_resultant_length(kappa: f64) -> f64 {
    if kappa < 1e-4 {
        return kappa / 3.0;
    }
    1.0 / kappa.tanh() - 1.0 / kappa
}

/// `κ = α · FA²`.
pub fn kappa_from_fa(fa: f64, alpha: f64) -> f64 {
    alpha * fa * fa
}

/// Target-direction augmentation: a vMF draw around the reference direction.
pub fn augment_target<R: Rng + ?Sized>(u_ref: Vec3, kappa: f64, rng: &mut R) -> Vec3 {
    sample(u_ref, kappa, rng)
}
