//! Small fixed-size vector helpers.

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Unit vector along `a`, or `None` when `a` is (numerically) zero.
pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    if n > 1e-300 && n.is_finite() {
        Some(scale(a, 1.0 / n))
    } else {
        None
    }
}

/// Angle between two vectors in radians.
pub fn angle(a: Vec3, b: Vec3) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos()
}

/// Angle between axes (sign-insensitive), in radians.
pub fn axis_angle(a: Vec3, b: Vec3) -> f64 {
    let c = (dot(a, b) / (norm(a) * norm(b))).abs();
    c.clamp(0.0, 1.0).acos()
}

/// Two unit vectors completing `u` to a right-handed orthonormal frame.
pub fn orthonormal_basis(u: Vec3) -> (Vec3, Vec3) {
    let pick = if u[0].abs() <= u[1].abs() && u[0].abs() <= u[2].abs() {
        [1.0, 0.0, 0.0]
    } else if u[1].abs() <= u[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let e1 = normalize(cross(u, pick)).expect("pick is never parallel to u");
    let e2 = cross(u, e1);
    (e1, e2)
}

/// Canonical representative of an axis: z ≥ 0, ties broken on y then x.
pub fn canonical_axis(v: Vec3) -> Vec3 {
    const TOL: f64 = 1e-12;
    let flip = if v[2].abs() > TOL {
        v[2] < 0.0
    } else if v[1].abs() > TOL {
        v[1] < 0.0
    } else {
        v[0] < 0.0
    };
    if flip {
        scale(v, -1.0)
    } else {
        v
    }
}

/// Unit vectors on a Fibonacci spiral over the full sphere.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Fibonacci spiral restricted to the upper hemisphere (z > 0).
pub fn fibonacci_hemisphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal() {
        for u in fibonacci_sphere(50) {
            let (a, b) = orthonormal_basis(u);
            assert!((norm(a) - 1.0).abs() < 1e-12);
            assert!((norm(b) - 1.0).abs() < 1e-12);
            assert!(dot(a, u).abs() < 1e-12 && dot(b, u).abs() < 1e-12 && dot(a, b).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_axis_rules() {
        assert_eq!(canonical_axis([0.0, 0.0, -1.0]), [0.0, 0.0, 1.0]);
        assert_eq!(canonical_axis([1.0, -1.0, 0.0]), [-1.0, 1.0, 0.0]);
        assert_eq!(canonical_axis([-1.0, 0.0, 0.0]), [1.0, 0.0, 0.0]);
    }
}
