//! Diffusion-tensor estimation, scalar maps, the analytic Gaussian diffusion
//! ODF and its real even spherical-harmonic representation.

mod odf;
mod sh;

pub use odf::{tensor_to_odf, GaussianOdf, OdfProjector};
pub use sh::{
    basis_row, eval_sh, project_sh, sh_basis, sh_degree, sh_index, ShProjector, N_COEFFS, SH_ORDER,
};

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{canonical_axis, Vec3};

/// Symmetric diffusion tensor `(Dxx, Dxy, Dxz, Dyy, Dyz, Dzz)` in mm²/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTensor(pub [f64; 6]);

/// Eigen-decomposition with eigenvalues sorted in decreasing order.
#[derive(Debug, Clone, Copy)]
pub struct TensorEigen {
    pub values: [f64; 3],
    pub vectors: [Vec3; 3],
    /// An eigenvalue was below -1e-12 before clamping to zero.
    pub invalid: bool,
}

impl DiffusionTensor {
    pub const ZERO: DiffusionTensor = DiffusionTensor([0.0; 6]);

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        DiffusionTensor([
            m[(0, 0)],
            0.5 * (m[(0, 1)] + m[(1, 0)]),
            0.5 * (m[(0, 2)] + m[(2, 0)]),
            m[(1, 1)],
            0.5 * (m[(1, 2)] + m[(2, 1)]),
            m[(2, 2)],
        ])
    }

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        DiffusionTensor([a, 0.0, 0.0, b, 0.0, c])
    }

    /// Tensor with the given eigenvalues along the orthonormal axes `vecs`.
    pub fn from_eigen(values: [f64; 3], vecs: [Vec3; 3]) -> Self {
        let mut m = Matrix3::zeros();
        for (l, v) in values.iter().zip(vecs.iter()) {
            let vv = nalgebra::Vector3::new(v[0], v[1], v[2]);
            m += vv * vv.transpose() * *l;
        }
        Self::from_matrix(&m)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let d = &self.0;
        Matrix3::new(d[0], d[1], d[2], d[1], d[3], d[4], d[2], d[4], d[5])
    }

    /// `gᵀ D g`
    pub fn quad(&self, g: Vec3) -> f64 {
        let d = &self.0;
        d[0] * g[0] * g[0]
            + d[3] * g[1] * g[1]
            + d[5] * g[2] * g[2]
            + 2.0 * (d[1] * g[0] * g[1] + d[2] * g[0] * g[2] + d[4] * g[1] * g[2])
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[3] + self.0[5]
    }

    pub fn add_scaled(&self, other: &DiffusionTensor, w: f64) -> Self {
        let mut out = self.0;
        for (o, v) in out.iter_mut().zip(other.0.iter()) {
            *o += w * v;
        }
        DiffusionTensor(out)
    }

    pub fn scaled(&self, w: f64) -> Self {
        DiffusionTensor(self.0.map(|v| v * w))
    }

    pub fn eigen(&self) -> TensorEigen {
        let se = SymmetricEigen::new(self.matrix());
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| se.eigenvalues[b].total_cmp(&se.eigenvalues[a]));
        let mut values = [0.0; 3];
        let mut vectors = [[0.0; 3]; 3];
        let mut invalid = false;
        for (k, &i) in order.iter().enumerate() {
            let mut l = se.eigenvalues[i];
            if l < -1e-12 {
                invalid = true;
            }
            if l < 0.0 {
                l = 0.0;
            }
            values[k] = l;
            let c = se.eigenvectors.column(i);
            vectors[k] = canonical_axis([c[0], c[1], c[2]]);
        }
        TensorEigen {
            values,
            vectors,
            invalid,
        }
    }

    pub fn md(&self) -> f64 {
        self.trace() / 3.0
    }

    /// Fractional anisotropy, `sqrt(3/2)·‖λ−λ̄‖/‖λ‖`; 0 for the zero tensor.
    pub fn fa(&self) -> f64 {
        fa_from_values(self.eigen().values)
    }

    /// Principal eigenvector with canonical sign (z ≥ 0, then y, then x);
    /// `None` for the zero tensor or a degenerate leading eigenvalue.
    pub fn principal_dir(&self) -> Option<Vec3> {
        let e = self.eigen();
        if e.values[0] <= 0.0 || (e.values[0] - e.values[1]).abs() <= 1e-12 * e.values[0] {
            return None;
        }
        Some(e.vectors[0])
    }
}

pub fn fa_from_values(l: [f64; 3]) -> f64 {
    let norm2 = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if norm2 <= 0.0 {
        return 0.0;
    }
    let m = (l[0] + l[1] + l[2]) / 3.0;
    let dev2 = (l[0] - m).powi(2) + (l[1] - m).powi(2) + (l[2] - m).powi(2);
    (1.5 * dev2 / norm2).sqrt().clamp(0.0, 1.0)
}

/// Eigenvalues `(λ∥, λ⊥, λ⊥)` of a prolate tensor with the given mean
/// diffusivity and fractional anisotropy.
pub fn prolate_eigenvalues(md: f64, fa: f64) -> [f64; 3] {
    let fa = fa.clamp(0.0, 0.999_999);
    let a = fa / (3.0 - 2.0 * fa * fa).sqrt();
    [md * (1.0 + 2.0 * a), md * (1.0 - a), md * (1.0 - a)]
}

/// Acquisition directions and b-values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientScheme {
    entries: Vec<(Vec3, f64)>,
}

impl GradientScheme {
    pub fn new(entries: Vec<(Vec3, f64)>) -> Result<Self> {
        for (g, b) in &entries {
            let n = crate::geom::norm(*g);
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "gradient direction {g:?} is not unit norm"
                )));
            }
            if !(*b >= 0.0) {
                return Err(Error::InvalidArgument(format!("negative b-value {b}")));
            }
        }
        Ok(GradientScheme { entries })
    }

    /// `n` directions spread over the hemisphere, all at the same b-value.
    pub fn spiral(n: usize, b: f64) -> Self {
        let entries = crate::geom::fibonacci_hemisphere(n)
            .into_iter()
            .map(|g| (g, b))
            .collect();
        GradientScheme { entries }
    }

    pub fn entries(&self) -> &[(Vec3, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Noise-free signal `S0·exp(−b gᵀDg)` for every scheme entry.
pub fn forward_signals(d: &DiffusionTensor, s0: f64, scheme: &GradientScheme) -> Vec<f64> {
    scheme
        .entries()
        .iter()
        .map(|(g, b)| s0 * (-b * d.quad(*g)).exp())
        .collect()
}

/// Log-linear least-squares tensor fit with a precomputed pseudo-inverse.
#[derive(Debug, Clone)]
pub struct TensorFitter {
    pinv: DMatrix<f64>,
    used: Vec<usize>,
}

/// Nonpositive signals are replaced by this floor before taking logs.
pub const SIGNAL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct TensorFit {
    pub tensor: DiffusionTensor,
    /// Number of signals (including S0) clamped to [`SIGNAL_FLOOR`].
    pub clamped: usize,
}

impl TensorFitter {
    pub fn new(scheme: &GradientScheme) -> Result<Self> {
        let used: Vec<usize> = scheme
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, (_, b))| *b > 0.0)
            .map(|(i, _)| i)
            .collect();
        if used.len() < 6 {
            return Err(Error::Estimation(format!(
                "tensor fit needs at least 6 diffusion-weighted directions, got {}",
                used.len()
            )));
        }
        let mut a = DMatrix::zeros(used.len(), 6);
        for (r, &i) in used.iter().enumerate() {
            let (g, b) = scheme.entries()[i];
            let row = [
                g[0] * g[0],
                2.0 * g[0] * g[1],
                2.0 * g[0] * g[2],
                g[1] * g[1],
                2.0 * g[1] * g[2],
                g[2] * g[2],
            ];
            for (c, v) in row.iter().enumerate() {
                a[(r, c)] = -b * v;
            }
        }
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-10 * smax) {
            return Err(Error::Estimation(format!(
                "rank-deficient tensor design matrix (singular values {smin:e} / {smax:e})"
            )));
        }
        let pinv = svd
            .pseudo_inverse(1e-12 * smax)
            .map_err(|e| Error::Estimation(e.to_string()))?;
        Ok(TensorFitter { pinv, used })
    }

    pub fn fit(&self, signals: &[f64], s0: f64) -> TensorFit {
        let mut clamped = 0;
        let mut floor = |v: f64| {
            if v > SIGNAL_FLOOR && v.is_finite() {
                v
            } else {
                clamped += 1;
                SIGNAL_FLOOR
            }
        };
        let ls0 = floor(s0).ln();
        let y: Vec<f64> = self
            .used
            .iter()
            .map(|&i| floor(signals[i]).ln() - ls0)
            .collect();
        let mut d = [0.0; 6];
        for (c, dv) in d.iter_mut().enumerate() {
            *dv = self.pinv.row(c).iter().zip(&y).map(|(p, v)| p * v).sum();
        }
        TensorFit {
            tensor: DiffusionTensor(d),
            clamped,
        }
    }
}

/// Fit `ln(S/S0) = −b gᵀDg` by linear least squares.
pub fn fit_tensor_lls(signals: &[f64], s0: f64, scheme: &GradientScheme) -> Result<TensorFit> {
    if signals.len() != scheme.len() {
        return Err(Error::Shape(format!(
            "{} signals for {} scheme entries",
            signals.len(),
            scheme.len()
        )));
    }
    let fit = TensorFitter::new(scheme)?.fit(signals, s0);
    if fit.clamped > 0 {
        log::warn!(
            "{} nonpositive signals clamped to {SIGNAL_FLOOR:e}",
            fit.clamped
        );
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{dot, norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = nalgebra::Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
    }

    #[test]
    fn noiseless_fit_recovers_tensor() {
        let scheme = GradientScheme::spiral(24, 500.0);
        let d = DiffusionTensor::diag(1.8e-3, 0.3e-3, 0.3e-3);
        let s = forward_signals(&d, 1.0, &scheme);
        let fit = fit_tensor_lls(&s, 1.0, &scheme).unwrap();
        for (a, b) in fit.tensor.0.iter().zip(d.0.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(fit.clamped, 0);
    }

    #[test]
    fn noiseless_fit_rotated_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scheme = GradientScheme::spiral(30, 500.0);
        for _ in 0..10 {
            let r = random_rotation(&mut rng);
            let m = r
                * Matrix3::from_diagonal(&nalgebra::Vector3::new(1.7e-3, 0.5e-3, 0.2e-3))
                * r.transpose();
            let d = DiffusionTensor::from_matrix(&m);
            let fit = fit_tensor_lls(&forward_signals(&d, 2.0, &scheme), 2.0, &scheme).unwrap();
            for (a, b) in fit.tensor.0.iter().zip(d.0.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn isotropic_signals_give_isotropic_tensor() {
        let scheme = GradientScheme::spiral(20, 500.0);
        let s = vec![(-500.0f64 * 1e-3).exp(); 20];
        let d = fit_tensor_lls(&s, 1.0, &scheme).unwrap().tensor;
        for (a, b) in
            d.0.iter()
                .zip(DiffusionTensor::diag(1e-3, 1e-3, 1e-3).0.iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn underdetermined_fit_errors() {
        let scheme = GradientScheme::spiral(5, 500.0);
        assert!(matches!(
            fit_tensor_lls(&[0.5; 5], 1.0, &scheme),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn collinear_directions_error() {
        let g = [1.0, 0.0, 0.0];
        let scheme = GradientScheme::new(vec![(g, 500.0); 8]).unwrap();
        assert!(matches!(
            TensorFitter::new(&scheme),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn nonpositive_signal_is_clamped() {
        let scheme = GradientScheme::spiral(12, 500.0);
        let mut s = forward_signals(&DiffusionTensor::diag(1e-3, 1e-3, 1e-3), 1.0, &scheme);
        s[3] = -0.1;
        let fit = fit_tensor_lls(&s, 1.0, &scheme).unwrap();
        assert_eq!(fit.clamped, 1);
        assert!(fit.tensor.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn scalar_maps() {
        let iso = DiffusionTensor::diag(1e-3, 1e-3, 1e-3);
        assert!(iso.fa().abs() < 1e-12);
        assert!((iso.md() - 1e-3).abs() < 1e-18);
        assert!((DiffusionTensor::diag(1.0, 0.0, 0.0).fa() - 1.0).abs() < 1e-12);
        // direct evaluation: λ=(1.8,0.3,0.3), mean 0.8, dev²=1+0.25+0.25=1.5, ‖λ‖²=3.42
        let fa = DiffusionTensor::diag(1.8e-3, 0.3e-3, 0.3e-3).fa();
        let expect = (1.5 * 1.5f64 / 3.42).sqrt();
        assert!((fa - expect).abs() < 1e-12);
        assert!((fa - 0.811).abs() < 1e-3);
    }

    #[test]
    fn zero_tensor() {
        assert_eq!(DiffusionTensor::ZERO.fa(), 0.0);
        assert!(DiffusionTensor::ZERO.principal_dir().is_none());
    }

    #[test]
    fn principal_direction_sign() {
        let d = DiffusionTensor::from_eigen(
            [2.0, 1.0, 0.5],
            [[0.0, 0.6, -0.8], [1.0, 0.0, 0.0], [0.0, 0.8, 0.6]],
        );
        let p = d.principal_dir().unwrap();
        assert!(p[2] >= 0.0);
        assert!((dot(p, [0.0, -0.6, 0.8]) - 1.0).abs() < 1e-12);
        let px = DiffusionTensor::diag(2.0, 1.0, 1.0)
            .principal_dir()
            .unwrap();
        assert_eq!(px.map(|v| v.abs()), [1.0, 0.0, 0.0]);
        assert!(px[0] > 0.0);
    }

    #[test]
    fn fa_rotation_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let l = [
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
            ];
            let d0 = DiffusionTensor::diag(l[0], l[1], l[2]);
            let r = random_rotation(&mut rng);
            let d1 = DiffusionTensor::from_matrix(&(r * d0.matrix() * r.transpose()));
            let (a, b) = (d0.fa(), d1.fa());
            assert!((0.0..=1.0).contains(&a));
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn prolate_eigenvalues_hit_target() {
        for fa in [0.05, 0.1, 0.2, 0.25, 0.3, 0.8] {
            let l = prolate_eigenvalues(1e-3, fa);
            assert!((fa_from_values(l) - fa).abs() < 1e-12);
            assert!(((l[0] + l[1] + l[2]) / 3.0 - 1e-3).abs() < 1e-15);
        }
    }

    #[test]
    fn spiral_scheme_is_unit() {
        let s = GradientScheme::spiral(30, 500.0);
        assert!(s
            .entries()
            .iter()
            .all(|(g, _)| (norm(*g) - 1.0).abs() < 1e-12));
    }
}
