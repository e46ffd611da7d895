//! Bundle-level evaluation: streamline density maps, percentile masks and
//! overlap metrics against ground-truth masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracker::TrackingReport;
use crate::volume::{Grid, Point3, Volume};

/// Voxels crossed by the segment `a → b` (continuous voxel coordinates),
/// where voxel `i` covers `[i − 0.5, i + 0.5)` on each axis. Cells outside the
/// grid are skipped.
pub fn segment_voxels(dims: [usize; 3], a: Point3, b: Point3, out: &mut Vec<[usize; 3]>) {
    let a = [a[0] + 0.5, a[1] + 0.5, a[2] + 0.5];
    let b = [b[0] + 0.5, b[1] + 0.5, b[2] + 0.5];
    let mut cell = [
        a[0].floor() as i64,
        a[1].floor() as i64,
        a[2].floor() as i64,
    ];
    let end = [
        b[0].floor() as i64,
        b[1].floor() as i64,
        b[2].floor() as i64,
    ];
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for ax in 0..3 {
        if d[ax] > 0.0 {
            step[ax] = 1;
            t_max[ax] = ((cell[ax] + 1) as f64 - a[ax]) / d[ax];
            t_delta[ax] = 1.0 / d[ax];
        } else if d[ax] < 0.0 {
            step[ax] = -1;
            t_max[ax] = (cell[ax] as f64 - a[ax]) / d[ax];
            t_delta[ax] = -1.0 / d[ax];
        }
    }
    let push = |c: [i64; 3], out: &mut Vec<[usize; 3]>| {
        if (0..3).all(|i| c[i] >= 0 && (c[i] as usize) < dims[i]) {
            out.push([c[0] as usize, c[1] as usize, c[2] as usize]);
        }
    };
    push(cell, out);
    let max_iter = (end[0] - cell[0]).abs() + (end[1] - cell[1]).abs() + (end[2] - cell[2]).abs();
    for _ in 0..max_iter {
        let ax = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[ax] > 1.0 {
            break;
        }
        cell[ax] += step[ax];
        t_max[ax] += t_delta[ax];
        push(cell, out);
    }
}

/// Sorted, deduplicated linear indices of voxels touched by one streamline.
pub fn streamline_voxels(grid: &Grid, points: &[Point3]) -> Vec<usize> {
    let q: Vec<Point3> = points.iter().map(|&p| grid.world_to_voxel(p)).collect();
    let mut cells = Vec::new();
    if q.len() == 1 {
        segment_voxels(grid.dims, q[0], q[0], &mut cells);
    }
    for w in q.windows(2) {
        segment_voxels(grid.dims, w[0], w[1], &mut cells);
    }
    let mut idx: Vec<usize> = cells
        .into_iter()
        .map(|[i, j, k]| grid.index(i, j, k))
        .collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Number of distinct streamlines touching each voxel.
pub fn density_map(streamlines: &[&[Point3]], grid: &Grid) -> Volume {
    let sets: Vec<Vec<usize>> = streamlines
        .par_iter()
        .map(|s| streamline_voxels(grid, s))
        .collect();
    let mut data = vec![0.0; grid.n_voxels()];
    for set in sets {
        for i in set {
            data[i] += 1.0;
        }
    }
    Volume::new(*grid, 1, data).expect("density shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskRule {
    pub percentile: f64,
    /// Rank over nonzero densities only (otherwise over every voxel).
    pub nonzero_only: bool,
}

impl Default for MaskRule {
    fn default() -> Self {
        MaskRule {
            percentile: 5.0,
            nonzero_only: true,
        }
    }
}

/// Keeps voxels whose density reaches the nearest-rank percentile.
pub fn mask_from_density(density: &Volume, rule: &MaskRule) -> Result<Vec<bool>> {
    if !(0.0..=100.0).contains(&rule.percentile) {
        return Err(Error::InvalidArgument(format!(
            "percentile must be in [0, 100], got {}",
            rule.percentile
        )));
    }
    let d = density.data();
    let mut vals: Vec<f64> = d
        .iter()
        .copied()
        .filter(|&v| !rule.nonzero_only || v > 0.0)
        .collect();
    if !d.iter().any(|&v| v > 0.0) {
        log::warn!("density map is empty; mask is empty");
        return Ok(vec![false; d.len()]);
    }
    vals.sort_by(f64::total_cmp);
    let rank = (rule.percentile / 100.0 * vals.len() as f64).ceil() as usize;
    let thr = vals[rank.max(1) - 1];
    Ok(d.iter().map(|&v| v > 0.0 && v >= thr).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub recon_voxels: usize,
    pub truth_voxels: usize,
    pub intersection: usize,
    /// Both masks empty; metrics are defined as 1.
    pub both_empty: bool,
}

/// Overlap of reconstruction `a` against truth `b`.
pub fn overlap(a: &[bool], b: &[bool]) -> Overlap {
    assert_eq!(a.len(), b.len(), "masks must have equal length");
    let na = a.iter().filter(|&&x| x).count();
    let nb = b.iter().filter(|&&x| x).count();
    let ni = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    if na == 0 && nb == 0 {
        return Overlap {
            dice: 1.0,
            precision: 1.0,
            recall: 1.0,
            recon_voxels: 0,
            truth_voxels: 0,
            intersection: 0,
            both_empty: true,
        };
    }
    Overlap {
        dice: ratio(2 * ni, na + nb),
        precision: ratio(ni, na),
        recall: ratio(ni, nb),
        recon_voxels: na,
        truth_voxels: nb,
        intersection: ni,
        both_empty: false,
    }
}

pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    overlap(a, b).dice
}

pub fn precision(a: &[bool], b: &[bool]) -> f64 {
    overlap(a, b).precision
}

pub fn recall(a: &[bool], b: &[bool]) -> f64 {
    overlap(a, b).recall
}

/// Ground truth for one bundle: mask plus endpoint caps (1 = start, 2 = end).
#[derive(Debug, Clone)]
pub struct BundleRegions {
    pub name: String,
    pub mask: Vec<bool>,
    pub caps: Vec<u8>,
}

fn cap_at(grid: &Grid, caps: &[u8], p: Point3) -> u8 {
    let q = grid.world_to_voxel(p);
    if let Some([i, j, k]) = grid.nearest_voxel(q) {
        let c = caps[grid.index(i, j, k)];
        if c != 0 {
            return c;
        }
    }
    // Fall back to the closest cap voxel among the 27 neighbours.
    let mut best = (f64::INFINITY, 0u8);
    for idx in crate::volume::neighborhood_indices(grid.dims, q) {
        let c = caps[idx];
        if c == 0 {
            continue;
        }
        let v = grid.coords(idx);
        let d2: f64 = (0..3).map(|a| (v[a] as f64 - q[a]).powi(2)).sum();
        if d2 < best.0 {
            best = (d2, c);
        }
    }
    best.1
}

/// Index of the bundle whose two caps hold the streamline's endpoints.
pub fn assign_bundle(grid: &Grid, bundles: &[BundleRegions], points: &[Point3]) -> Option<usize> {
    let (first, last) = (points.first()?, points.last()?);
    bundles.iter().position(|b| {
        let (a, z) = (cap_at(grid, &b.caps, *first), cap_at(grid, &b.caps, *last));
        a != 0 && z != 0 && a != z
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleScore {
    pub name: String,
    pub n_streamlines: usize,
    #[serde(flatten)]
    pub overlap: Overlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bundles: Vec<BundleScore>,
    pub mean_dice: f64,
    pub accepted: usize,
    pub assigned: usize,
    pub unassigned: usize,
    pub mask_rule: MaskRule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tracking: Option<TrackingReport>,
}

pub fn evaluate(
    streamlines: &[&[Point3]],
    grid: &Grid,
    truth: &[BundleRegions],
    rule: &MaskRule,
    tracking: Option<TrackingReport>,
) -> Result<EvalReport> {
    if let Some(b) = truth
        .iter()
        .find(|b| b.mask.len() != grid.n_voxels() || b.caps.len() != grid.n_voxels())
    {
        return Err(Error::Shape(format!(
            "truth regions for bundle '{}' do not match the grid",
            b.name
        )));
    }
    let assignment: Vec<Option<usize>> = streamlines
        .par_iter()
        .map(|s| assign_bundle(grid, truth, s))
        .collect();
    let bundles: Vec<BundleScore> = truth
        .par_iter()
        .enumerate()
        .map(|(bi, b)| {
            let mine: Vec<&[Point3]> = streamlines
                .iter()
                .zip(&assignment)
                .filter(|(_, a)| **a == Some(bi))
                .map(|(s, _)| *s)
                .collect();
            let recon = if mine.is_empty() {
                vec![false; grid.n_voxels()]
            } else {
                mask_from_density(&density_map(&mine, grid), rule)?
            };
            Ok(BundleScore {
                name: b.name.clone(),
                n_streamlines: mine.len(),
                overlap: overlap(&recon, &b.mask),
            })
        })
        .collect::<Result<_>>()?;
    let assigned = assignment.iter().filter(|a| a.is_some()).count();
    let mean_dice = if bundles.is_empty() {
        0.0
    } else {
        bundles.iter().map(|b| b.overlap.dice).sum::<f64>() / bundles.len() as f64
    };
    Ok(EvalReport {
        bundles,
        mean_dice,
        accepted: streamlines.len(),
        assigned,
        unassigned: streamlines.len() - assigned,
        mask_rule: *rule,
        tracking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn grid(n: usize) -> Grid {
        Grid::axis_aligned([n; 3], [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn straight_line_density() {
        let g = grid(20);
        let line: Vec<Point3> = (0..=18).map(|i| [2.0 + i as f64 * 0.5, 5.0, 5.0]).collect();
        let d = density_map(&[&line], &g);
        let hit: Vec<usize> = (0..g.n_voxels()).filter(|&i| d.data()[i] > 0.0).collect();
        assert_eq!(hit.len(), 10);
        assert!(hit.iter().all(|&i| d.data()[i] == 1.0));
        let d2 = density_map(&[&line, &line], &g);
        assert_eq!(d2.data().iter().copied().fold(0.0, f64::max), 2.0);
    }

    fn slab_hits(a: Point3, b: Point3, c: [usize; 3]) -> bool {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for ax in 0..3 {
            let lo = c[ax] as f64 - 0.5;
            let hi = c[ax] as f64 + 0.5;
            let d = b[ax] - a[ax];
            if d.abs() < 1e-15 {
                if a[ax] < lo || a[ax] >= hi {
                    return false;
                }
            } else {
                let (mut u, mut v) = ((lo - a[ax]) / d, (hi - a[ax]) / d);
                if u > v {
                    std::mem::swap(&mut u, &mut v);
                }
                t0 = t0.max(u);
                t1 = t1.min(v);
            }
        }
        t0 <= t1 + 1e-12
    }

    #[test]
    fn voxelisation_matches_supersampling_oracle() {
        let g = grid(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let a = [
                rng.gen_range(1.0..14.0),
                rng.gen_range(1.0..14.0),
                rng.gen_range(1.0..14.0),
            ];
            let dir = crate::geom::normalize([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ])
            .unwrap();
            let b = crate::geom::add(a, crate::geom::scale(dir, 0.5));
            let mut cells = Vec::new();
            segment_voxels(g.dims, a, b, &mut cells);
            let got: BTreeSet<[usize; 3]> = cells.iter().copied().collect();
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                let p = [
                    a[0] + t * (b[0] - a[0]),
                    a[1] + t * (b[1] - a[1]),
                    a[2] + t * (b[2] - a[2]),
                ];
                let c = [
                    (p[0] + 0.5).floor() as usize,
                    (p[1] + 0.5).floor() as usize,
                    (p[2] + 0.5).floor() as usize,
                ];
                assert!(got.contains(&c), "supersampled cell {c:?} missing");
            }
            for c in &got {
                assert!(slab_hits(a, b, *c), "cell {c:?} not crossed");
            }
        }
    }

    #[test]
    fn between_samples_still_counted() {
        let g = grid(8);
        // The two samples sit in voxels 2 and 4; the segment crosses voxel 3.
        let d = density_map(&[&[[2.0, 2.0, 2.0], [4.0, 2.0, 2.0]][..]], &g);
        assert_eq!(d.at(3, 2, 2)[0], 1.0);
    }

    #[test]
    fn percentile_masks() {
        let g = Grid::axis_aligned([10, 10, 2], [1.0; 3], [0.0; 3]).unwrap();
        let mut v = Volume::zeros(g, 1);
        for i in 0..100 {
            v.data_mut()[i] = (i + 1) as f64;
        }
        let m = mask_from_density(&v, &MaskRule::default()).unwrap();
        assert_eq!(m.iter().filter(|&&x| x).count(), 96);
        assert!(!m[3] && m[4]);
        let mut flat = Volume::zeros(g, 1);
        for i in 0..37 {
            flat.data_mut()[i * 3] = 4.0;
        }
        let m = mask_from_density(&flat, &MaskRule::default()).unwrap();
        assert!(m
            .iter()
            .enumerate()
            .all(|(i, &x)| x == (flat.data()[i] > 0.0)));
        let zero = MaskRule {
            percentile: 0.0,
            nonzero_only: true,
        };
        let m0 = mask_from_density(&v, &zero).unwrap();
        let mut masked = v.clone();
        for (x, keep) in masked.data_mut().iter_mut().zip(&m0) {
            if !keep {
                *x = 0.0;
            }
        }
        assert_eq!(mask_from_density(&masked, &zero).unwrap(), m0);
        assert!(
            mask_from_density(&Volume::zeros(g, 1), &MaskRule::default())
                .unwrap()
                .iter()
                .all(|x| !x)
        );
    }

    #[test]
    fn overlap_arithmetic() {
        let n = 200;
        let mut a = vec![false; n];
        let mut b = vec![false; n];
        for x in a.iter_mut().take(100) {
            *x = true;
        }
        for x in b.iter_mut().skip(60).take(50) {
            *x = true;
        }
        let o = overlap(&a, &b);
        assert_eq!(o.intersection, 40);
        assert!((o.dice - 8.0 / 15.0).abs() < 1e-12);
        assert!((o.precision - 0.4).abs() < 1e-12 && (o.recall - 0.8).abs() < 1e-12);
        assert_eq!(dice(&a, &b), dice(&b, &a));
        assert_eq!(dice(&a, &a), 1.0);
        let c: Vec<bool> = a.iter().map(|x| !x).collect();
        assert_eq!(dice(&a, &c), 0.0);
        let e = overlap(&[false; 4], &[false; 4]);
        assert!(e.both_empty && e.dice == 1.0);
        assert_eq!(recall(&[false; 4], &[true, false, true, false]), 0.0);
        assert_eq!(precision(&[true, false], &[true, true]), 1.0);
    }

    #[test]
    fn evaluation_accounting() {
        let g = grid(12);
        let mut caps = vec![0u8; g.n_voxels()];
        caps[g.index(1, 5, 5)] = 1;
        caps[g.index(10, 5, 5)] = 2;
        let line: Vec<Point3> = (0..=18).map(|i| [1.0 + i as f64 * 0.5, 5.0, 5.0]).collect();
        let mask: Vec<bool> = (0..g.n_voxels())
            .map(|i| {
                let c = g.coords(i);
                c[1] == 5 && c[2] == 5 && (1..=10).contains(&c[0])
            })
            .collect();
        let truth = vec![BundleRegions {
            name: "x".into(),
            mask,
            caps,
        }];
        let stray: Vec<Point3> = vec![[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]];
        let r = evaluate(
            &[&line, &line, &stray],
            &g,
            &truth,
            &MaskRule::default(),
            None,
        )
        .unwrap();
        assert_eq!(r.accepted, 3);
        assert_eq!(r.assigned + r.unassigned, r.accepted);
        assert_eq!(r.assigned, 2);
        assert_eq!(r.bundles[0].overlap.dice, 1.0);
        let empty = evaluate(&[], &g, &truth, &MaskRule::default(), None).unwrap();
        assert_eq!(empty.bundles[0].overlap.recall, 0.0);
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
