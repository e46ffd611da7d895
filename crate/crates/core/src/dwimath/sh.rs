//! Real, antipodally symmetric spherical-harmonic basis up to order 8.
//!
//! Coefficient `j` holds degree `l ∈ {0,2,4,6,8}` and order `m ∈ [-l, l]`
//! with `j = l(l+1)/2 + m`. For each `(l, m)`:
//!
//! * `m < 0`: `√2 · N(l,|m|) · P(l,|m|)(cos θ) · cos(|m| φ)`
//! * `m = 0`: `N(l,0) · P(l,0)(cos θ)`
//! * `m > 0`: `√2 · N(l,m) · P(l,m)(cos θ) · sin(m φ)`
//!
//! with `N(l,m) = sqrt((2l+1)/(4π) · (l−m)!/(l+m)!)` and `P` the associated
//! Legendre functions including the Condon–Shortley phase. The basis is
//! orthonormal under the surface measure of the unit sphere, so the constant
//! `1/(4π)` has `c₀ = 1/(2√π)` and nothing else.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geom::{fibonacci_sphere, Vec3};

pub const SH_ORDER: usize = 8;
pub const N_COEFFS: usize = (SH_ORDER + 1) * (SH_ORDER + 2) / 2;

pub fn sh_index(l: usize, m: i64) -> usize {
    debug_assert!(l.is_multiple_of(2) && m.unsigned_abs() as usize <= l);
    ((l * (l + 1) / 2) as i64 + m) as usize
}

/// `(l, m)` of coefficient `j`.
pub fn sh_degree(j: usize) -> (usize, i64) {
    let mut l = 0;
    while j >= (l + 1) * (l + 2) / 2 {
        l += 2;
    }
    let m = j as i64 - (l * (l + 1) / 2) as i64;
    (l, m)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Associated Legendre `P(l,m)(x)` for all `l ≤ 8`, `m ≤ l`, with the
/// Condon–Shortley phase. Indexed `p[l][m]`.
fn legendre_table(x: f64) -> [[f64; SH_ORDER + 1]; SH_ORDER + 1] {
    let mut p = [[0.0; SH_ORDER + 1]; SH_ORDER + 1];
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for m in 0..=SH_ORDER {
        if m > 0 {
            pmm *= -((2 * m - 1) as f64) * s;
        }
        p[m][m] = pmm;
        if m < SH_ORDER {
            p[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in (m + 2)..=SH_ORDER {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }
    p
}

fn norm_const(l: usize, m: usize) -> f64 {
    ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(l - m) / factorial(l + m)).sqrt()
}

/// All 45 basis functions evaluated at unit direction `u`.
pub fn basis_row(u: Vec3, out: &mut [f64]) {
    debug_assert_eq!(out.len(), N_COEFFS);
    let z = u[2].clamp(-1.0, 1.0);
    let phi = u[1].atan2(u[0]);
    let p = legendre_table(z);
    let sqrt2 = std::f64::consts::SQRT_2;
    for l in (0..=SH_ORDER).step_by(2) {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            let base = norm_const(l, am) * p[l][am];
            let v = match m.cmp(&0) {
                std::cmp::Ordering::Less => sqrt2 * base * (am as f64 * phi).cos(),
                std::cmp::Ordering::Equal => base,
                std::cmp::Ordering::Greater => sqrt2 * base * (am as f64 * phi).sin(),
            };
            out[sh_index(l, m)] = v;
        }
    }
}

/// Basis matrix, one row per direction.
pub fn sh_basis(dirs: &[Vec3]) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(dirs.len(), N_COEFFS);
    let mut row = [0.0; N_COEFFS];
    for (i, u) in dirs.iter().enumerate() {
        basis_row(*u, &mut row);
        for (j, v) in row.iter().enumerate() {
            b[(i, j)] = *v;
        }
    }
    b
}

pub fn eval_sh(c: &[f64], u: Vec3) -> f64 {
    let mut row = [0.0; N_COEFFS];
    basis_row(u, &mut row);
    row.iter().zip(c).map(|(a, b)| a * b).sum()
}

/// Least-squares projector from samples on fixed directions to coefficients.
/// `lambda` weights a Laplace–Beltrami penalty `l²(l+1)²`; with `lambda = 0`
/// the plain pseudo-inverse is used.
#[derive(Debug, Clone)]
pub struct ShProjector {
    dirs: Vec<Vec3>,
    pinv: DMatrix<f64>,
}

impl ShProjector {
    pub fn new(dirs: Vec<Vec3>, lambda: f64) -> Result<Self> {
        if dirs.len() < N_COEFFS {
            return Err(Error::InvalidArgument(format!(
                "SH projection needs at least {N_COEFFS} samples, got {}",
                dirs.len()
            )));
        }
        let b = sh_basis(&dirs);
        let pinv = if lambda > 0.0 {
            let mut btb = b.transpose() * &b;
            for j in 0..N_COEFFS {
                let (l, _) = sh_degree(j);
                btb[(j, j)] += lambda * ((l * l * (l + 1) * (l + 1)) as f64);
            }
            let chol = btb
                .cholesky()
                .ok_or_else(|| Error::Estimation("regularised SH normal matrix not SPD".into()))?;
            chol.inverse() * b.transpose()
        } else {
            let svd = b.svd(true, true);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if !(smin > 1e-10 * smax) {
                return Err(Error::Estimation(
                    "SH sample directions are degenerate".into(),
                ));
            }
            svd.pseudo_inverse(1e-14 * smax)
                .map_err(|e| Error::Estimation(e.to_string()))?
        };
        Ok(ShProjector { dirs, pinv })
    }

    /// 100-direction spiral, unregularised.
    pub fn default_spiral() -> Self {
        Self::new(fibonacci_sphere(100), 0.0).expect("spiral directions are well spread")
    }

    pub fn dirs(&self) -> &[Vec3] {
        &self.dirs
    }

    pub fn project(&self, samples: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; N_COEFFS];
        self.project_into(samples, &mut out);
        out
    }

    pub fn project_into(&self, samples: &[f64], out: &mut [f64]) {
        debug_assert_eq!(samples.len(), self.dirs.len());
        for (j, o) in out.iter_mut().enumerate() {
            *o = self
                .pinv
                .row(j)
                .iter()
                .zip(samples)
                .map(|(p, s)| p * s)
                .sum();
        }
    }
}

/// Least-squares fit of 45 coefficients to samples `f` on `dirs`.
pub fn project_sh(f: &[f64], dirs: &[Vec3]) -> Result<Vec<f64>> {
    if f.len() != dirs.len() {
        return Err(Error::Shape(format!(
            "{} samples for {} directions",
            f.len(),
            dirs.len()
        )));
    }
    Ok(ShProjector::new(dirs.to_vec(), 0.0)?.project(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn count_is_45() {
        assert_eq!(N_COEFFS, 45);
        assert_eq!(sh_index(8, 8), 44);
        assert_eq!(sh_index(0, 0), 0);
        for j in 0..N_COEFFS {
            let (l, m) = sh_degree(j);
            assert_eq!(sh_index(l, m), j);
        }
    }

    #[test]
    fn constant_projects_to_y00() {
        let dirs = fibonacci_sphere(100);
        let f = vec![1.0 / (4.0 * std::f64::consts::PI); 100];
        let c = project_sh(&f, &dirs).unwrap();
        assert!((c[0] - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-13);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn orthonormal_by_quadrature() {
        let dirs = fibonacci_sphere(20000);
        let b = sh_basis(&dirs);
        let g = b.transpose() * &b * (4.0 * std::f64::consts::PI / dirs.len() as f64);
        for i in 0..N_COEFFS {
            for j in 0..N_COEFFS {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - e).abs() < 2e-3, "({i},{j}) = {}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn antipodal_symmetry() {
        let mut row_a = [0.0; N_COEFFS];
        let mut row_b = [0.0; N_COEFFS];
        for u in fibonacci_sphere(37) {
            basis_row(u, &mut row_a);
            basis_row([-u[0], -u[1], -u[2]], &mut row_b);
            for (a, b) in row_a.iter().zip(row_b.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn band_limited_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dirs = fibonacci_sphere(100);
        for _ in 0..5 {
            let c: Vec<f64> = (0..N_COEFFS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f: Vec<f64> = dirs.iter().map(|u| eval_sh(&c, *u)).collect();
            let c2 = project_sh(&f, &dirs).unwrap();
            let probe = fibonacci_sphere(500);
            let err = probe
                .iter()
                .map(|u| (eval_sh(&c, *u) - eval_sh(&c2, *u)).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "err {err}");
        }
    }

    #[test]
    fn underdetermined_projection() {
        let dirs = fibonacci_sphere(30);
        assert!(project_sh(&vec![0.0; 30], &dirs).is_err());
    }

    #[test]
    fn y20_closed_form() {
        // Y(2,0) = sqrt(5/(16π)) (3cos²θ − 1)
        let u = [0.6, 0.0, 0.8];
        let mut row = [0.0; N_COEFFS];
        basis_row(u, &mut row);
        let expect = (5.0 / (16.0 * std::f64::consts::PI)).sqrt() * (3.0 * 0.64 - 1.0);
        assert!((row[sh_index(2, 0)] - expect).abs() < 1e-14);
    }
}
