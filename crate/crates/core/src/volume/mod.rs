//! Regular 3D grids: geometry, multi-channel voxel data, tissue labels,
//! interpolation and NIfTI-1 I/O.
//!
//! Values live at voxel centres: continuous voxel coordinate `(0,0,0)` is the
//! centre of the first voxel. Linear voxel index is `x + nx*(y + ny*z)` and
//! channels are interleaved (channel fastest) in memory.

mod nifti;

pub use nifti::{read_labels, read_nifti, write_labels, write_nifti, DataType};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Voxel → world map (mm), stored as the top three rows of a 4×4 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    rows: [[f64; 4]; 3],
    #[serde(skip, default = "zero_rows")]
    inv: [[f64; 4]; 3],
}

fn zero_rows() -> [[f64; 4]; 3] {
    [[0.0; 4]; 3]
}

impl Affine {
    pub fn new(rows: [[f64; 4]; 3]) -> Result<Self> {
        let m = [
            [rows[0][0], rows[0][1], rows[0][2]],
            [rows[1][0], rows[1][1], rows[1][2]],
            [rows[2][0], rows[2][1], rows[2][2]],
        ];
        let det = det3(&m);
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "affine 3x3 block is singular (det = {det})"
            )));
        }
        let a = inv3(&m, det);
        let t = [rows[0][3], rows[1][3], rows[2][3]];
        let mut inv = [[0.0; 4]; 3];
        for r in 0..3 {
            for c in 0..3 {
                inv[r][c] = a[r][c];
            }
            inv[r][3] = -(a[r][0] * t[0] + a[r][1] * t[1] + a[r][2] * t[2]);
        }
        Ok(Affine { rows, inv })
    }

    pub fn identity() -> Self {
        Self::scaled([1.0; 3], [0.0; 3])
    }

    /// Diagonal affine with the given spacing and origin.
    pub fn scaled(spacing: [f64; 3], origin: Point3) -> Self {
        Self::new([
            [spacing[0], 0.0, 0.0, origin[0]],
            [0.0, spacing[1], 0.0, origin[1]],
            [0.0, 0.0, spacing[2], origin[2]],
        ])
        .expect("positive spacing gives an invertible affine")
    }

    pub fn rows(&self) -> &[[f64; 4]; 3] {
        &self.rows
    }

    pub fn apply(&self, q: Point3) -> Point3 {
        apply_rows(&self.rows, q)
    }

    pub fn apply_inverse(&self, p: Point3) -> Point3 {
        apply_rows(&self.inv, p)
    }

    /// Map a voxel-axis direction to world axes (linear part only).
    pub fn direction_to_world(&self, v: Point3) -> Point3 {
        let r = &self.rows;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn direction_to_voxel(&self, v: Point3) -> Point3 {
        let r = &self.inv;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    /// Rebuild the cached inverse after deserialisation.
    pub fn restored(self) -> Result<Self> {
        Affine::new(self.rows)
    }
}

fn apply_rows(r: &[[f64; 4]; 3], q: Point3) -> Point3 {
    [
        r[0][0] * q[0] + r[0][1] * q[1] + r[0][2] * q[2] + r[0][3],
        r[1][0] * q[0] + r[1][1] * q[1] + r[1][2] * q[2] + r[1][3],
        r[2][0] * q[0] + r[2][1] * q[1] + r[2][2] * q[2] + r[2][3],
    ]
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &[[f64; 3]; 3], det: f64) -> [[f64; 3]; 3] {
    let d = 1.0 / det;
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * d,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * d,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * d,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * d,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * d,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * d,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * d,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * d,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * d,
        ],
    ]
}

/// Geometry shared by every volume on the same lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: Affine) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive: {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive: {spacing:?}"
            )));
        }
        Ok(Grid {
            dims,
            spacing,
            affine,
        })
    }

    /// Axis-aligned grid with the given spacing and world origin of voxel 0.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: Point3) -> Result<Self> {
        Self::new(dims, spacing, Affine::scaled(spacing, origin))
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn world_to_voxel(&self, p: Point3) -> Point3 {
        self.affine.apply_inverse(p)
    }

    pub fn voxel_to_world(&self, q: Point3) -> Point3 {
        self.affine.apply(q)
    }

    /// Nearest voxel to a continuous coordinate, `None` outside the grid.
    pub fn nearest_voxel(&self, q: Point3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = q[a].round();
            if !(r >= 0.0) || r > (self.dims[a] - 1) as f64 {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    pub fn same_lattice(&self, other: &Grid) -> bool {
        self.dims == other.dims && self.affine.rows == other.affine.rows
    }
}

/// Trilinear corner weights: 8 (linear index, weight) pairs plus an
/// extrapolation flag set when `q` had to be clamped into the grid.
#[derive(Debug, Clone, Copy)]
pub struct TrilinearStencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub extrapolated: bool,
}

impl TrilinearStencil {
    pub fn new(dims: [usize; 3], q: Point3) -> Self {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut extrapolated = false;
        for a in 0..3 {
            let hi = (dims[a] - 1) as f64;
            let mut c = q[a];
            if !c.is_finite() {
                c = 0.0;
                extrapolated = true;
            }
            if c < 0.0 {
                c = 0.0;
                extrapolated = true;
            } else if c > hi {
                c = hi;
                extrapolated = true;
            }
            if dims[a] == 1 {
                base[a] = 0;
                frac[a] = 0.0;
            } else {
                let i0 = (c.floor() as usize).min(dims[a] - 2);
                base[a] = i0;
                frac[a] = c - i0 as f64;
            }
        }
        let step = |a: usize| usize::from(dims[a] > 1);
        let nx = dims[0];
        let nxy = dims[0] * dims[1];
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        for corner in 0..8 {
            let dx = corner & 1;
            let dy = (corner >> 1) & 1;
            let dz = (corner >> 2) & 1;
            let i = base[0] + dx * step(0);
            let j = base[1] + dy * step(1);
            let k = base[2] + dz * step(2);
            idx[corner] = i + nx * j + nxy * k;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            w[corner] = wx * wy * wz;
        }
        TrilinearStencil {
            idx,
            w,
            extrapolated,
        }
    }
}

/// The 27 voxel centres around the voxel nearest to `q`, clamped at the
/// borders. Order is z-major: `dz` outermost, then `dy`, then `dx`.
pub fn neighborhood_indices(dims: [usize; 3], q: Point3) -> [usize; 27] {
    let mut centre = [0i64; 3];
    for a in 0..3 {
        let c = if q[a].is_finite() { q[a].round() } else { 0.0 };
        centre[a] = (c as i64).clamp(0, dims[a] as i64 - 1);
    }
    let clamp = |v: i64, a: usize| v.clamp(0, dims[a] as i64 - 1) as usize;
    let mut out = [0usize; 27];
    let mut n = 0;
    for dz in -1..=1i64 {
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let i = clamp(centre[0] + dx, 0);
                let j = clamp(centre[1] + dy, 1);
                let k = clamp(centre[2] + dz, 2);
                out[n] = i + dims[0] * (j + dims[1] * k);
                n += 1;
            }
        }
    }
    out
}

/// Multi-channel scalar field on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    channels: usize,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("channels must be positive".into()));
        }
        if data.len() != grid.n_voxels() * channels {
            return Err(Error::Shape(format!(
                "data length {} != {} voxels x {} channels",
                data.len(),
                grid.n_voxels(),
                channels
            )));
        }
        Ok(Volume {
            grid,
            channels,
            data,
        })
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        Volume {
            grid,
            channels,
            data: vec![0.0; grid.n_voxels() * channels],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn voxel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn voxel_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> &[f64] {
        self.voxel(self.grid.index(i, j, k))
    }

    pub fn world_to_voxel(&self, p: Point3) -> Point3 {
        self.grid.world_to_voxel(p)
    }

    /// Trilinear interpolation at a continuous voxel coordinate. Returns the
    /// channel vector and whether `q` was clamped (extrapolated).
    pub fn interp_trilinear(&self, q: Point3) -> (Vec<f64>, bool) {
        let mut out = vec![0.0; self.channels];
        let ex = self.interp_into(q, &mut out);
        (out, ex)
    }

    /// Allocation-free interpolation; adds nothing, overwrites `out`.
    pub fn interp_into(&self, q: Point3, out: &mut [f64]) -> bool {
        let s = TrilinearStencil::new(self.grid.dims, q);
        self.apply_stencil(&s, out);
        s.extrapolated
    }

    pub fn apply_stencil(&self, s: &TrilinearStencil, out: &mut [f64]) {
        let c = self.channels;
        debug_assert_eq!(out.len(), c);
        out.iter_mut().for_each(|v| *v = 0.0);
        for corner in 0..8 {
            let w = s.w[corner];
            if w == 0.0 {
                continue;
            }
            let src = &self.data[s.idx[corner] * c..(s.idx[corner] + 1) * c];
            for (o, v) in out.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }

    /// Channel vectors at the 27 voxel centres around `q` (see
    /// [`neighborhood_indices`] for the order), concatenated.
    pub fn neighborhood_values(&self, q: Point3) -> Vec<f64> {
        let mut out = Vec::with_capacity(27 * self.channels);
        for idx in neighborhood_indices(self.grid.dims, q) {
            out.extend_from_slice(self.voxel(idx));
        }
        out
    }

    /// Single channel as its own volume.
    pub fn channel(&self, c: usize) -> Volume {
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Volume {
            grid: self.grid,
            channels: 1,
            data,
        }
    }
}

/// Tissue classes of the segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Csf = 1,
    CorticalGm = 2,
    SubcorticalGm = 3,
    Wm = 4,
}

impl Tissue {
    pub const COUNT: usize = 5;

    pub fn from_code(code: i64) -> Option<Tissue> {
        Some(match code {
            0 => Tissue::Background,
            1 => Tissue::Csf,
            2 => Tissue::CorticalGm,
            3 => Tissue::SubcorticalGm,
            4 => Tissue::Wm,
            _ => return None,
        })
    }

    pub fn is_gm(self) -> bool {
        matches!(self, Tissue::CorticalGm | Tissue::SubcorticalGm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    labels: Vec<Tissue>,
}

impl LabelVolume {
    pub fn new(grid: Grid, labels: Vec<Tissue>) -> Result<Self> {
        if labels.len() != grid.n_voxels() {
            return Err(Error::Shape(format!(
                "label count {} != {} voxels",
                labels.len(),
                grid.n_voxels()
            )));
        }
        Ok(LabelVolume { grid, labels })
    }

    pub fn filled(grid: Grid, tissue: Tissue) -> Self {
        LabelVolume {
            labels: vec![tissue; grid.n_voxels()],
            grid,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn labels(&self) -> &[Tissue] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [Tissue] {
        &mut self.labels
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Tissue {
        self.labels[self.grid.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, t: Tissue) {
        let idx = self.grid.index(i, j, k);
        self.labels[idx] = t;
    }

    /// Label of the voxel containing world point `p`; background outside the grid.
    pub fn label_at_world(&self, p: Point3) -> Tissue {
        match self.grid.nearest_voxel(self.grid.world_to_voxel(p)) {
            Some([i, j, k]) => self.get(i, j, k),
            None => Tissue::Background,
        }
    }

    /// One-hot expansion to a 5-channel volume (channel = tissue code).
    pub fn one_hot(&self) -> Volume {
        let mut data = vec![0.0; self.labels.len() * Tissue::COUNT];
        for (v, t) in self.labels.iter().enumerate() {
            data[v * Tissue::COUNT + *t as usize] = 1.0;
        }
        Volume {
            grid: self.grid,
            channels: Tissue::COUNT,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: [usize; 3]) -> Grid {
        Grid::axis_aligned(n, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn identity_world_to_voxel() {
        let g = grid([8, 8, 8]);
        assert_eq!(g.world_to_voxel([3.0, 4.0, 5.0]), [3.0, 4.0, 5.0]);
    }

    #[test]
    fn scaled_world_to_voxel() {
        let g = Grid::axis_aligned([8, 8, 8], [1.2; 3], [0.0; 3]).unwrap();
        let q = g.world_to_voxel([1.2, 0.0, 0.0]);
        assert!((q[0] - 1.0).abs() < 1e-15 && q[1] == 0.0 && q[2] == 0.0);
    }

    #[test]
    fn world_voxel_round_trip_general_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut rows = [[0.0; 4]; 3];
            for r in rows.iter_mut() {
                for v in r.iter_mut() {
                    *v = rng.gen_range(-2.0..2.0);
                }
            }
            rows[0][0] += 3.0;
            rows[1][1] += 3.0;
            rows[2][2] += 3.0;
            let a = Affine::new(rows).unwrap();
            let g = Grid::new([4, 4, 4], [1.0; 3], a).unwrap();
            for _ in 0..50 {
                let q = [
                    rng.gen_range(-5.0..70.0),
                    rng.gen_range(-5.0..70.0),
                    rng.gen_range(-5.0..70.0),
                ];
                let back = g.world_to_voxel(g.voxel_to_world(q));
                let p = g.voxel_to_world(q);
                let p2 = g.voxel_to_world(g.world_to_voxel(p));
                for a in 0..3 {
                    assert!((back[a] - q[a]).abs() < 1e-9);
                    assert!((p2[a] - p[a]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn singular_affine_rejected() {
        let rows = [
            [1.0, 0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        assert!(Affine::new(rows).is_err());
    }

    #[test]
    fn interp_reproduces_voxel_values() {
        let g = grid([5, 5, 5]);
        let data: Vec<f64> = (0..125).map(|v| v as f64 * 0.5).collect();
        let vol = Volume::new(g, 1, data).unwrap();
        let (v, ex) = vol.interp_trilinear([2.0, 2.0, 2.0]);
        assert_eq!(v[0], vol.at(2, 2, 2)[0]);
        assert!(!ex);
        let (v, _) = vol.interp_trilinear([4.0, 4.0, 4.0]);
        assert_eq!(v[0], vol.at(4, 4, 4)[0]);
    }

    #[test]
    fn interp_midpoint() {
        let g = grid([2, 1, 1]);
        let vol = Volume::new(g, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(vol.interp_trilinear([0.5, 0.0, 0.0]).0[0], 0.5);
    }

    #[test]
    fn interp_out_of_bounds_is_flagged_and_clamped() {
        let g = grid([3, 3, 3]);
        let data: Vec<f64> = (0..27).map(|v| v as f64).collect();
        let vol = Volume::new(g, 1, data).unwrap();
        let (v, ex) = vol.interp_trilinear([-1.0, 0.0, 0.0]);
        assert!(ex);
        assert_eq!(v[0], vol.at(0, 0, 0)[0]);
        let (v, ex) = vol.interp_trilinear([2.0, 5.0, 2.0]);
        assert!(ex);
        assert_eq!(v[0], vol.at(2, 2, 2)[0]);
    }

    #[test]
    fn trilinear_polynomial_reproduced() {
        // f = a + bx + cy + dz + exy + fxz + gyz + hxyz is reproduced exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |x: f64, y: f64, z: f64| {
            c[0] + c[1] * x
                + c[2] * y
                + c[3] * z
                + c[4] * x * y
                + c[5] * x * z
                + c[6] * y * z
                + c[7] * x * y * z
        };
        let g = grid([6, 7, 5]);
        let mut data = vec![0.0; g.n_voxels()];
        for k in 0..5 {
            for j in 0..7 {
                for i in 0..6 {
                    data[g.index(i, j, k)] = f(i as f64, j as f64, k as f64);
                }
            }
        }
        let vol = Volume::new(g, 1, data).unwrap();
        for _ in 0..100 {
            let q = [
                rng.gen_range(0.0..5.0),
                rng.gen_range(0.0..6.0),
                rng.gen_range(0.0..4.0),
            ];
            let v = vol.interp_trilinear(q).0[0];
            assert!((v - f(q[0], q[1], q[2])).abs() < 1e-12);
        }
    }

    #[test]
    fn neighborhood_interior_order() {
        let g = grid([5, 5, 5]);
        let data: Vec<f64> = (0..125).map(|v| v as f64).collect();
        let vol = Volume::new(g, 1, data).unwrap();
        let n = vol.neighborhood_values([2.2, 1.9, 2.4]);
        assert_eq!(n.len(), 27);
        let mut expect = Vec::new();
        for dz in 1..=3 {
            for dy in 1..=3 {
                for dx in 1..=3 {
                    expect.push(g.index(dx, dy, dz) as f64);
                }
            }
        }
        assert_eq!(n, expect);
        let mut sorted = n.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 27);
    }

    #[test]
    fn neighborhood_corner_clamps() {
        let g = grid([4, 4, 4]);
        let data: Vec<f64> = (0..64).map(|v| v as f64).collect();
        let vol = Volume::new(g, 1, data).unwrap();
        let n = vol.neighborhood_values([0.0, 0.0, 0.0]);
        assert_eq!(n.len(), 27);
        assert_eq!(n[0], 0.0);
        // (-1,-1,-1) and (0,0,0) both clamp to voxel 0
        assert_eq!(n.iter().filter(|&&v| v == 0.0).count(), 8);
    }

    #[test]
    fn neighborhood_constant_field() {
        let g = grid([3, 3, 3]);
        let vol = Volume::new(g, 2, vec![1.5; 54]).unwrap();
        let n = vol.neighborhood_values([1.0, 1.0, 1.0]);
        assert!(n.iter().all(|&v| v == 1.5));
        assert_eq!(n.len(), 54);
    }

    #[test]
    fn one_hot_expansion() {
        let g = grid([2, 1, 1]);
        let lv = LabelVolume::new(g, vec![Tissue::Wm, Tissue::Csf]).unwrap();
        let oh = lv.one_hot();
        assert_eq!(oh.voxel(0), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(oh.voxel(1), &[0.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
