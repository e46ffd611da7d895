//! Analytic diffusion ODF of a Gaussian (single-tensor) model:
//! `ψ(u) = 1 / (4π |D|^{1/2} (uᵀD⁻¹u)^{3/2})`, which integrates to one over
//! the sphere.

use nalgebra::Matrix3;
use rayon::prelude::*;

use super::sh::{ShProjector, N_COEFFS};
use super::DiffusionTensor;
use crate::geom::Vec3;
use crate::volume::{Grid, Volume};

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

#[derive(Debug, Clone, Copy)]
pub struct GaussianOdf {
    dinv: Matrix3<f64>,
    norm: f64,
    /// True when the tensor was unusable and `ψ = 1/(4π)` is returned.
    pub isotropic_fallback: bool,
}

/// Build the ODF of `d`; eigenvalues are floored at `1e-6·MD` first.
pub fn tensor_to_odf(d: &DiffusionTensor) -> GaussianOdf {
    let fallback = GaussianOdf {
        dinv: Matrix3::identity(),
        norm: 1.0 / FOUR_PI,
        isotropic_fallback: true,
    };
    let e = d.eigen();
    let md = (e.values[0] + e.values[1] + e.values[2]) / 3.0;
    if !(md > 0.0) || !md.is_finite() {
        return fallback;
    }
    let floor = 1e-6 * md;
    let l = e.values.map(|v| v.max(floor));
    let det = l[0] * l[1] * l[2];
    if !(det > 0.0) || !det.is_finite() {
        log::warn!("singular tensor after eigenvalue clamping; isotropic ODF used");
        return fallback;
    }
    let mut dinv = Matrix3::zeros();
    for (k, lk) in l.iter().enumerate() {
        let v = nalgebra::Vector3::new(e.vectors[k][0], e.vectors[k][1], e.vectors[k][2]);
        dinv += v * v.transpose() / *lk;
    }
    GaussianOdf {
        dinv,
        norm: 1.0 / (FOUR_PI * det.sqrt()),
        isotropic_fallback: false,
    }
}

impl GaussianOdf {
    pub fn eval(&self, u: Vec3) -> f64 {
        if self.isotropic_fallback {
            return self.norm;
        }
        let v = nalgebra::Vector3::new(u[0], u[1], u[2]);
        let q = (v.transpose() * self.dinv * v)[(0, 0)];
        self.norm * q.powf(-1.5)
    }
}

/// Tensor → 45 SH coefficients via sampling on fixed directions.
#[derive(Debug, Clone)]
pub struct OdfProjector {
    proj: ShProjector,
}

impl Default for OdfProjector {
    fn default() -> Self {
        OdfProjector {
            proj: ShProjector::default_spiral(),
        }
    }
}

impl OdfProjector {
    pub fn new(proj: ShProjector) -> Self {
        OdfProjector { proj }
    }

    pub fn coefficients(&self, d: &DiffusionTensor, out: &mut [f64]) {
        let odf = tensor_to_odf(d);
        let samples: Vec<f64> = self.proj.dirs().iter().map(|u| odf.eval(*u)).collect();
        self.proj.project_into(&samples, out);
    }

    /// 45-channel ODF volume from per-voxel tensors.
    pub fn odf_volume(&self, grid: Grid, tensors: &[DiffusionTensor]) -> Volume {
        let mut data = vec![0.0; tensors.len() * N_COEFFS];
        data.par_chunks_mut(N_COEFFS)
            .zip(tensors.par_iter())
            .for_each(|(out, d)| self.coefficients(d, out));
        Volume::new(grid, N_COEFFS, data).expect("one coefficient block per tensor")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dwimath::{eval_sh, sh_index};
    use crate::geom::{axis_angle, fibonacci_sphere};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng) -> DiffusionTensor {
        let axis = nalgebra::Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let r = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            rng.gen_range(0.0..3.0),
        );
        let l = nalgebra::Vector3::new(
            rng.gen_range(0.3..2.0),
            rng.gen_range(0.3..2.0),
            rng.gen_range(0.3..2.0),
        ) * 1e-3;
        DiffusionTensor::from_matrix(
            &(r.matrix() * Matrix3::from_diagonal(&l) * r.matrix().transpose()),
        )
    }

    #[test]
    fn isotropic_odf_is_constant() {
        let odf = tensor_to_odf(&DiffusionTensor::diag(7e-4, 7e-4, 7e-4));
        for u in fibonacci_sphere(20) {
            assert!((odf.eval(u) - 1.0 / FOUR_PI).abs() < 1e-12);
        }
    }

    #[test]
    fn odf_integrates_to_one_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let quad = fibonacci_sphere(10_000);
        for _ in 0..20 {
            let odf = tensor_to_odf(&random_spd(&mut rng));
            let integral: f64 =
                quad.iter().map(|u| odf.eval(*u)).sum::<f64>() * FOUR_PI / quad.len() as f64;
            assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
            for u in quad.iter().take(10) {
                assert!((odf.eval(*u) - odf.eval([-u[0], -u[1], -u[2]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn odf_peaks_on_principal_axis() {
        let d = DiffusionTensor::diag(1.8e-3, 0.3e-3, 0.3e-3);
        let odf = tensor_to_odf(&d);
        let peak = odf.eval([1.0, 0.0, 0.0]);
        for u in fibonacci_sphere(200) {
            assert!(odf.eval(u) <= peak + 1e-12);
        }
    }

    #[test]
    fn zero_tensor_falls_back() {
        assert!(tensor_to_odf(&DiffusionTensor::ZERO).isotropic_fallback);
    }

    #[test]
    fn isotropic_sh_only_l0() {
        let p = OdfProjector::default();
        let mut c = vec![0.0; N_COEFFS];
        p.coefficients(&DiffusionTensor::diag(1e-3, 1e-3, 1e-3), &mut c);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-6));
        assert!((c[sh_index(0, 0)] - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sh_argmax_tracks_principal_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = OdfProjector::default();
        let dense = fibonacci_sphere(20_000);
        let mut tested = 0;
        while tested < 10 {
            let d = random_spd(&mut rng);
            if d.fa() < 0.2 {
                continue;
            }
            tested += 1;
            let mut c = vec![0.0; N_COEFFS];
            p.coefficients(&d, &mut c);
            let best = dense
                .iter()
                .copied()
                .max_by(|a, b| eval_sh(&c, *a).total_cmp(&eval_sh(&c, *b)))
                .unwrap();
            let ang = axis_angle(best, d.principal_dir().unwrap()).to_degrees();
            assert!(ang < 3.0, "angle {ang}");
        }
    }
}
