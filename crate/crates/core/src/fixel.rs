//! Per-voxel fiber directions ("fixels") derived from tractograms.
//!
//! Segment directions are folded onto the `z ≥ 0` hemisphere, binned by the
//! voxel that holds the segment midpoint, then grouped by greedy angular
//! clustering. Each voxel keeps at most two fixels, strongest first.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, canonical_axis, dot, normalize, scale, sub, Vec3};
use crate::volume::{read_nifti, write_nifti, DataType, Grid, Point3, Volume};

pub const MAX_FIXELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Fixel {
    pub dir: Vec3,
    pub support: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixelConfig {
    pub angle_thresh_deg: f64,
    pub min_support: u32,
}

impl Default for FixelConfig {
    fn default() -> Self {
        FixelConfig {
            angle_thresh_deg: 30.0,
            min_support: 5,
        }
    }
}

impl FixelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.angle_thresh_deg > 0.0 && self.angle_thresh_deg <= 90.0) {
            return Err(Error::Schema(format!(
                "fixel angle threshold must be in (0, 90], got {}",
                self.angle_thresh_deg
            )));
        }
        Ok(())
    }
}

/// Up to two fixels per voxel; empty slots have `support == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixelMap {
    grid: Grid,
    slots: Vec<[Fixel; MAX_FIXELS]>,
}

impl FixelMap {
    pub fn empty(grid: Grid) -> Self {
        let n = grid.n_voxels();
        FixelMap {
            grid,
            slots: vec![[Fixel::default(); MAX_FIXELS]; n],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Stores up to two fixels for a voxel, sorted by descending support.
    pub fn set(&mut self, idx: usize, fixels: &[Fixel]) {
        let mut v: Vec<Fixel> = fixels.iter().copied().filter(|f| f.support > 0).collect();
        v.sort_by_key(|f| std::cmp::Reverse(f.support));
        let mut slot = [Fixel::default(); MAX_FIXELS];
        for (s, f) in slot.iter_mut().zip(v) {
            *s = Fixel {
                dir: canonical_axis(normalize(f.dir).unwrap_or([0.0; 3])),
                support: f.support,
            };
        }
        self.slots[idx] = slot;
    }

    pub fn get(&self, idx: usize) -> &[Fixel] {
        let s = &self.slots[idx];
        let n = s.iter().take_while(|f| f.support > 0).count();
        &s[..n]
    }

    pub fn count(&self, idx: usize) -> usize {
        self.get(idx).len()
    }

    pub fn n_nonempty(&self) -> usize {
        self.slots.iter().filter(|s| s[0].support > 0).count()
    }

    /// Six-channel field: the two direction triplets, zero where empty.
    pub fn to_volume(&self) -> Volume {
        let mut data = Vec::with_capacity(self.slots.len() * 6);
        for s in &self.slots {
            for f in s {
                let d = if f.support > 0 { f.dir } else { [0.0; 3] };
                data.extend_from_slice(&d);
            }
        }
        Volume::new(self.grid, 6, data).expect("fixel volume shape")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_nifti(&self.to_volume(), path, DataType::Float32)?;
        let supports: Vec<[u64; 3]> = self
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s[0].support > 0)
            .map(|(i, s)| [i as u64, s[0].support as u64, s[1].support as u64])
            .collect();
        let side = FixelSidecar {
            n_voxels: self.slots.len(),
            supports,
        };
        let p = sidecar_path(path);
        std::fs::write(&p, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (vol, _) = read_nifti(path)?;
        if vol.channels() != 6 {
            return Err(Error::Shape(format!(
                "fixel volume must have 6 channels, found {}",
                vol.channels()
            )));
        }
        let p = sidecar_path(path);
        let raw = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let side: FixelSidecar = serde_json::from_slice(&raw)?;
        if side.n_voxels != vol.grid().n_voxels() {
            return Err(Error::Shape(
                "fixel sidecar does not match volume size".into(),
            ));
        }
        let mut map = FixelMap::empty(*vol.grid());
        for [i, s1, s2] in side.supports {
            let i = i as usize;
            if i >= map.slots.len() {
                return Err(Error::Format(format!(
                    "fixel sidecar voxel index {i} out of range"
                )));
            }
            let v = vol.voxel(i);
            let f = [
                Fixel {
                    dir: [v[0], v[1], v[2]],
                    support: s1 as u32,
                },
                Fixel {
                    dir: [v[3], v[4], v[5]],
                    support: s2 as u32,
                },
            ];
            map.slots[i] = f;
        }
        Ok(map)
    }
}

#[derive(Serialize, Deserialize)]
struct FixelSidecar {
    n_voxels: usize,
    /// `[voxel index, support 1, support 2]` for every non-empty voxel.
    supports: Vec<[u64; 3]>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.trim_end_matches(".gz").trim_end_matches(".nii");
    path.with_file_name(format!("{stem}.json"))
}

/// Greedy clustering of axial directions; returns clusters sorted by support.
pub fn cluster_directions(dirs: &[Vec3], angle_thresh_deg: f64) -> Vec<Fixel> {
    let cos_t = angle_thresh_deg.to_radians().cos();
    let mut pool: Vec<Vec3> = dirs
        .iter()
        .filter_map(|&d| normalize(d))
        .map(canonical_axis)
        .collect();
    pool.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let near = |a: Vec3, b: Vec3| dot(a, b).abs() >= cos_t;
    let mut out = Vec::new();
    while !pool.is_empty() {
        // Neighbour count first, then summed |cos| among neighbours, so the
        // choice depends on geometry rather than input order.
        let mut best = 0;
        let mut best_key = (0usize, f64::NEG_INFINITY);
        for (i, &d) in pool.iter().enumerate() {
            let (mut n, mut w) = (0usize, 0.0);
            for &e in &pool {
                if near(d, e) {
                    n += 1;
                    w += dot(d, e).abs();
                }
            }
            if n > best_key.0 || (n == best_key.0 && w > best_key.1) {
                best = i;
                best_key = (n, w);
            }
        }
        let seed = pool[best];
        let mut sum = [0.0; 3];
        let mut rest = Vec::with_capacity(pool.len());
        let mut support = 0;
        for &d in &pool {
            if near(seed, d) {
                let s = if dot(seed, d) < 0.0 { -1.0 } else { 1.0 };
                sum = add(sum, scale(d, s));
                support += 1;
            } else {
                rest.push(d);
            }
        }
        let dir = canonical_axis(normalize(sum).unwrap_or(seed));
        out.push(Fixel { dir, support });
        pool = rest;
    }
    out.sort_by_key(|f| std::cmp::Reverse(f.support));
    out
}

/// Fixel map from streamlines given in world coordinates.
pub fn build_fixels<'a, I>(streamlines: I, grid: &Grid, cfg: &FixelConfig) -> Result<FixelMap>
where
    I: IntoIterator<Item = &'a [Point3]>,
{
    cfg.validate()?;
    let mut bins: BTreeMap<usize, Vec<Vec3>> = BTreeMap::new();
    let mut n_lines = 0usize;
    for line in streamlines {
        n_lines += 1;
        for w in line.windows(2) {
            let Some(d) = normalize(sub(w[1], w[0])) else {
                continue;
            };
            let mid = scale(add(w[0], w[1]), 0.5);
            if let Some([i, j, k]) = grid.nearest_voxel(grid.world_to_voxel(mid)) {
                bins.entry(grid.index(i, j, k)).or_default().push(d);
            }
        }
    }
    if n_lines == 0 {
        return Err(Error::InvalidArgument(
            "cannot build fixels from an empty tractogram".into(),
        ));
    }
    let bins: Vec<(usize, Vec<Vec3>)> = bins.into_iter().collect();
    let clustered: Vec<(usize, Vec<Fixel>)> = bins
        .par_iter()
        .map(|(idx, dirs)| {
            let mut c = cluster_directions(dirs, cfg.angle_thresh_deg);
            c.retain(|f| f.support >= cfg.min_support);
            c.truncate(MAX_FIXELS);
            (*idx, c)
        })
        .collect();
    let mut map = FixelMap::empty(*grid);
    for (idx, c) in clustered {
        map.set(idx, &c);
    }
    Ok(map)
}

/// The two fixel directions at the voxel nearest to `q` (voxel coordinates),
/// zero-padded, each sign-aligned with `prev` when given.
pub fn fixels_at(map: &FixelMap, q: Point3, prev: Option<Vec3>) -> [Vec3; MAX_FIXELS] {
    let mut out = [[0.0; 3]; MAX_FIXELS];
    let Some([i, j, k]) = map.grid.nearest_voxel(q) else {
        return out;
    };
    for (o, f) in out.iter_mut().zip(map.get(map.grid.index(i, j, k))) {
        let flip = prev.is_some_and(|p| dot(p, f.dir) < 0.0);
        *o = if flip { scale(f.dir, -1.0) } else { f.dir };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{axis_angle, cross};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Grid {
        let c = -((n - 1) as f64) / 2.0;
        Grid::axis_aligned([n; 3], [1.0; 3], [c; 3]).unwrap()
    }

    fn jittered(rng: &mut ChaCha8Rng, axis: Vec3, max_deg: f64) -> Vec3 {
        let (e1, e2) = crate::geom::orthonormal_basis(axis);
        let th = rng.gen::<f64>() * max_deg.to_radians();
        let ph = rng.gen::<f64>() * std::f64::consts::TAU;
        let lat = add(scale(e1, ph.cos()), scale(e2, ph.sin()));
        normalize(add(scale(axis, th.cos()), scale(lat, th.sin()))).unwrap()
    }

    #[test]
    fn single_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dirs: Vec<Vec3> = (0..40)
            .map(|i| {
                let d = jittered(&mut rng, [1.0, 0.0, 0.0], 10.0);
                if i % 2 == 0 {
                    d
                } else {
                    scale(d, -1.0)
                }
            })
            .collect();
        let c = cluster_directions(&dirs, 30.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].support, 40);
        assert!(axis_angle(c[0].dir, [1.0, 0.0, 0.0]).to_degrees() < 3.0);
    }

    #[test]
    fn two_orthogonal_clusters() {
        let mut dirs = vec![[1.0, 0.0, 0.0]; 10];
        dirs.extend(vec![[0.0, 1.0, 0.0]; 10]);
        let c = cluster_directions(&dirs, 30.0);
        assert_eq!(c.len(), 2);
        let mut axes: Vec<Vec3> = c.iter().map(|f| f.dir).collect();
        axes.sort_by(|a, b| b[0].total_cmp(&a[0]));
        assert!(axis_angle(axes[0], [1.0, 0.0, 0.0]) < 1e-12);
        assert!(axis_angle(axes[1], [0.0, 1.0, 0.0]) < 1e-12);
    }

    #[test]
    fn top_two_of_three() {
        let g = grid(3);
        let dirs: Vec<Vec3> = [0.0f64, 60.0, 120.0]
            .iter()
            .map(|d| [d.to_radians().cos(), d.to_radians().sin(), 0.0])
            .collect();
        // Exhaustive oracle: three equal, mutually separated groups give three
        // clusters of equal support; only two survive.
        let mut lines: Vec<Vec<Point3>> = Vec::new();
        for (gi, d) in dirs.iter().enumerate() {
            for r in 0..(6 + gi) {
                let o = scale(*d, 0.05 * r as f64);
                lines.push(vec![sub(o, scale(*d, 0.2)), add(o, scale(*d, 0.2))]);
            }
        }
        let all = cluster_directions(
            &lines.iter().map(|l| sub(l[1], l[0])).collect::<Vec<_>>(),
            30.0,
        );
        assert_eq!(all.len(), 3);
        let m = build_fixels(
            lines.iter().map(|l| l.as_slice()),
            &g,
            &FixelConfig::default(),
        )
        .unwrap();
        let c = m.grid().index(1, 1, 1);
        assert_eq!(m.count(c), 2);
        assert_eq!(m.get(c)[0].support, 8);
        assert_eq!(m.get(c)[1].support, 7);
        assert!(axis_angle(m.get(c)[0].dir, dirs[2]) < 1e-9);
    }

    #[test]
    fn min_support_and_empty() {
        let g = grid(5);
        let line: Vec<Point3> = (0..3).map(|i| [i as f64 * 0.3 - 0.3, 0.0, 0.0]).collect();
        let m = build_fixels([line.as_slice()], &g, &FixelConfig::default()).unwrap();
        assert_eq!(m.n_nonempty(), 0);
        let empty: Vec<&[Point3]> = vec![];
        assert!(build_fixels(empty, &g, &FixelConfig::default()).is_err());
        assert_eq!(fixels_at(&m, [2.0, 2.0, 2.0], None), [[0.0; 3]; 2]);
    }

    #[test]
    fn lookup_and_sign_alignment() {
        let g = grid(3);
        let mut m = FixelMap::empty(g);
        m.set(
            g.index(1, 1, 1),
            &[Fixel {
                dir: [1.0, 0.0, 0.0],
                support: 9,
            }],
        );
        let f = fixels_at(&m, [1.2, 0.9, 1.1], None);
        assert_eq!(f, [[1.0, 0.0, 0.0], [0.0; 3]]);
        let f = fixels_at(&m, [1.0, 1.0, 1.0], Some([-1.0, 0.0, 0.0]));
        assert_eq!(f[0], [-1.0, 0.0, 0.0]);
        assert_eq!(fixels_at(&m, [0.0, 0.0, 0.0], None), [[0.0; 3]; 2]);
        assert_eq!(fixels_at(&m, [-3.0, 0.0, 0.0], None), [[0.0; 3]; 2]);
    }

    fn rot_z(v: Vec3) -> Vec3 {
        [-v[1], v[0], v[2]]
    }
    fn rot_x(v: Vec3) -> Vec3 {
        [v[0], -v[2], v[1]]
    }

    #[test]
    fn rotation_equivariance() {
        let n = 7;
        let g = grid(n);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut lines = Vec::new();
        for _ in 0..60 {
            let axis = if rng.gen::<bool>() {
                [0.8, 0.5, 0.33]
            } else {
                [0.1, -0.7, 0.7]
            };
            let d = jittered(&mut rng, normalize(axis).unwrap(), 12.0);
            let o = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let l: Vec<Point3> = (-6..=6)
                .map(|t| add(o, scale(d, 0.37 * t as f64)))
                .collect();
            lines.push(l);
        }
        let cfg = FixelConfig {
            angle_thresh_deg: 30.0,
            min_support: 2,
        };
        let base = build_fixels(lines.iter().map(|l| l.as_slice()), &g, &cfg).unwrap();
        for rot in [rot_z as fn(Vec3) -> Vec3, rot_x] {
            let rl: Vec<Vec<Point3>> = lines
                .iter()
                .map(|l| l.iter().map(|&p| rot(p)).collect())
                .collect();
            let rm = build_fixels(rl.iter().map(|l| l.as_slice()), &g, &cfg).unwrap();
            let mut checked = 0;
            for idx in 0..g.n_voxels() {
                let c = g.coords(idx);
                let w = g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
                let rw = rot(w);
                let rq = g.world_to_voxel(rw);
                let ridx = g.index(
                    rq[0].round() as usize,
                    rq[1].round() as usize,
                    rq[2].round() as usize,
                );
                let a = base.get(idx);
                let b = rm.get(ridx);
                assert_eq!(a.len(), b.len());
                for (fa, fb) in a.iter().zip(b) {
                    assert_eq!(fa.support, fb.support);
                    assert!(axis_angle(rot(fa.dir), fb.dir) < 1e-6);
                    checked += 1;
                }
            }
            assert!(checked > 20);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let g = grid(4);
        let mut m = FixelMap::empty(g);
        m.set(
            3,
            &[
                Fixel {
                    dir: [0.0, 0.6, 0.8],
                    support: 12,
                },
                Fixel {
                    dir: [1.0, 0.0, 0.0],
                    support: 5,
                },
            ],
        );
        m.set(
            10,
            &[Fixel {
                dir: normalize(cross([1.0, 2.0, 3.0], [0.0, 0.0, 1.0])).unwrap(),
                support: 6,
            }],
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fix.nii");
        m.save(&p).unwrap();
        assert!(dir.path().join("fix.json").exists());
        let back = FixelMap::load(&p).unwrap();
        for idx in 0..g.n_voxels() {
            assert_eq!(back.count(idx), m.count(idx));
            for (a, b) in back.get(idx).iter().zip(m.get(idx)) {
                assert_eq!(a.support, b.support);
                assert!(axis_angle(a.dir, b.dir) < 1e-6);
            }
        }
    }
}
