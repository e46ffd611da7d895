//! Synthetic fiber phantoms: tubular bundles around analytic centerlines,
//! tissue labels, simulated single-shell signals refit with a single tensor,
//! ground-truth streamlines and per-bundle masks.
//!
//! Geometry is specified in continuous voxel coordinates; everything written
//! out (keypoints, streamlines) is in world millimetres.

mod curve;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dwimath::{
    prolate_eigenvalues, DiffusionTensor, GradientScheme, OdfProjector, TensorFitter,
};
use crate::error::{Error, Result};
use crate::evalmod::{density_map, mask_from_density, BundleRegions, MaskRule};
use crate::fixel::{Fixel, FixelMap};
use crate::geom::{axis_angle, cross, dot, orthonormal_basis, sub, Vec3};
use crate::rng::{self, Domain};
use crate::tracker::{read_tck, write_tck};
use crate::volume::{
    read_labels, read_nifti, write_labels, write_nifti, DataType, Grid, LabelVolume, Point3,
    Tissue, Volume,
};

pub use curve::{Centerline, CurveSpec, Piece, TubeCoord};

pub const PRESETS: [&str; 5] = [
    "straight",
    "curved",
    "crossing-90",
    "crossing-60",
    "branching",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapKind {
    Cortical,
    Subcortical,
}

impl CapKind {
    fn tissue(self) -> Tissue {
        match self {
            CapKind::Cortical => Tissue::CorticalGm,
            CapKind::Subcortical => Tissue::SubcorticalGm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    pub name: String,
    pub curve: CurveSpec,
    pub radius_mm: f64,
    pub fa: f64,
    #[serde(default = "cortical")]
    pub start_cap: CapKind,
    #[serde(default = "cortical")]
    pub end_cap: CapKind,
}

fn cortical() -> CapKind {
    CapKind::Cortical
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub bundles: Vec<BundleSpec>,
    /// Rician noise σ relative to S0 = 1; zero gives noiseless signals.
    pub noise_sigma: f64,
    pub seed: u64,
    pub b_value: f64,
    pub n_directions: usize,
    /// Uniform translation applied to every centerline, per axis (voxels).
    pub geometry_jitter_vox: f64,
    pub md_wm: f64,
    pub md_gm: f64,
    pub md_csf: f64,
    /// Anisotropy of GM caps, oriented along the bundle tangent.
    pub gm_fa: f64,
    /// Volume fraction of the lowest-index bundle where bundles overlap.
    pub dominant_fraction: f64,
    /// Depth of the GM cap at each bundle end (voxels).
    pub cap_depth_vox: f64,
    /// Background rim around the brain box (voxels).
    pub margin_vox: usize,
    /// Lattice spacing of ground-truth streamline offsets (voxels).
    pub gt_offset_step_vox: f64,
    pub gt_step_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            spacing_mm: 1.2,
            bundles: Vec::new(),
            noise_sigma: 0.0,
            seed: 0,
            b_value: 500.0,
            n_directions: 30,
            geometry_jitter_vox: 0.0,
            md_wm: 1.0e-3,
            md_gm: 1.0e-3,
            md_csf: 3.0e-3,
            gm_fa: 0.15,
            dominant_fraction: 0.6,
            cap_depth_vox: 2.0,
            margin_vox: 2,
            gt_offset_step_vox: 0.1,
            gt_step_mm: 0.6,
        }
    }
}

/// Ground-truth streamlines keep this distance (voxels) inside the labelled
/// tube so every sample's nearest voxel centre lies inside it.
pub const GT_INSET_VOX: f64 = 0.9;

impl PhantomSpec {
    /// Named preset laid out relative to `dims`; geometry jitter of 1.5 voxels.
    pub fn preset(name: &str, dims: [usize; 3], seed: u64) -> Result<Self> {
        let n = dims.map(|d| d as f64);
        let c = n.map(|d| (d - 1.0) / 2.0);
        let base = PhantomSpec {
            dims,
            seed,
            geometry_jitter_vox: 1.5,
            ..PhantomSpec::default()
        };
        let r = 3.5 * base.spacing_mm;
        let fa = 0.25;
        let x0 = base.margin_vox as f64 + 1.0 + base.geometry_jitter_vox;
        let z_up = [0.0, 0.0, 1.0];
        let bundle = |name: &str, start: Vec3, dir: Vec3, pieces: Vec<Piece>| BundleSpec {
            name: name.into(),
            curve: CurveSpec {
                start,
                direction: dir,
                plane_normal: z_up,
                pieces,
            },
            radius_mm: r,
            fa,
            start_cap: CapKind::Cortical,
            end_cap: CapKind::Cortical,
        };
        let span = |axis: usize| n[axis] - 1.0 - 2.0 * x0;
        let bundles = match name {
            "straight" => vec![bundle(
                "straight",
                [x0, c[1], c[2]],
                [1.0, 0.0, 0.0],
                vec![Piece::Straight { length: span(0) }],
            )],
            "curved" => {
                let radius = 12.0;
                let leg = (n[0] - 1.0 - x0 - 3.5 - 3.0 - radius - x0).clamp(4.0, 24.0);
                vec![bundle(
                    "u-fiber",
                    [x0, c[1] - radius, c[2]],
                    [1.0, 0.0, 0.0],
                    vec![
                        Piece::Straight { length: leg },
                        Piece::Turn {
                            radius,
                            angle_deg: 180.0,
                        },
                        Piece::Straight { length: leg },
                    ],
                )]
            }
            "crossing-90" | "crossing" => vec![
                bundle(
                    "x-bundle",
                    [x0, c[1], c[2]],
                    [1.0, 0.0, 0.0],
                    vec![Piece::Straight { length: span(0) }],
                ),
                bundle(
                    "y-bundle",
                    [c[0], x0, c[2]],
                    [0.0, 1.0, 0.0],
                    vec![Piece::Straight { length: span(1) }],
                ),
            ],
            "crossing-60" => {
                let d = [60f64.to_radians().cos(), 60f64.to_radians().sin(), 0.0];
                let h = (c[1] - x0 - 3.5).min(c[0] - x0) / d[1].max(d[0]);
                vec![
                    bundle(
                        "x-bundle",
                        [x0, c[1], c[2]],
                        [1.0, 0.0, 0.0],
                        vec![Piece::Straight { length: span(0) }],
                    ),
                    bundle(
                        "oblique-bundle",
                        [c[0] - h * d[0], c[1] - h * d[1], c[2]],
                        d,
                        vec![Piece::Straight { length: 2.0 * h }],
                    ),
                ]
            }
            "branching" => {
                let trunk = (0.3 * n[0]).round();
                let (radius, ang) = (12.0, 35f64);
                let turn_dx = radius * ang.to_radians().sin();
                let tail =
                    ((n[0] - 1.0 - x0 - 4.0 - trunk - turn_dx) / ang.to_radians().cos()).max(4.0);
                let branch = |name: &str, sign: f64| {
                    let mut b = bundle(
                        name,
                        [x0, c[1], c[2]],
                        [1.0, 0.0, 0.0],
                        vec![
                            Piece::Straight { length: trunk },
                            Piece::Turn {
                                radius,
                                angle_deg: sign * ang,
                            },
                            Piece::Straight { length: tail },
                        ],
                    );
                    b.start_cap = CapKind::Subcortical;
                    b
                };
                vec![branch("branch-left", 1.0), branch("branch-right", -1.0)]
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown phantom preset '{other}'; expected one of {PRESETS:?}"
                )))
            }
        };
        Ok(PhantomSpec { bundles, ..base })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(m));
        if self.dims.iter().any(|&d| d < 8) {
            return bad(format!("phantom dims must be >= 8, got {:?}", self.dims));
        }
        if !(self.spacing_mm > 0.0) {
            return bad("spacing_mm must be > 0".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.b_value > 0.0) || self.n_directions < 6 {
            return bad("noise_sigma >= 0, b_value > 0 and n_directions >= 6 are required".into());
        }
        if !(0.0..1.0).contains(&self.gm_fa) {
            return bad("gm_fa must be in [0, 1)".into());
        }
        if !(self.dominant_fraction > 0.0 && self.dominant_fraction <= 1.0) {
            return bad("dominant_fraction must be in (0, 1]".into());
        }
        if !(self.gt_offset_step_vox > 0.0)
            || !(self.gt_step_mm > 0.0)
            || !(self.cap_depth_vox > 0.0)
        {
            return bad("ground-truth steps and cap depth must be > 0".into());
        }
        if !(self.geometry_jitter_vox >= 0.0) {
            return bad("geometry_jitter_vox must be >= 0".into());
        }
        for b in &self.bundles {
            if b.radius_mm < self.spacing_mm {
                return bad(format!(
                    "bundle '{}' radius must be at least one voxel",
                    b.name
                ));
            }
            if !(0.0..=1.0).contains(&b.fa) {
                return bad(format!("bundle '{}' FA must be in [0, 1]", b.name));
            }
            let line = Centerline::new(&b.curve)?;
            if line.length() <= 2.0 * self.cap_depth_vox {
                return bad(format!("bundle '{}' is shorter than its two caps", b.name));
            }
            let lo = self.margin_vox as f64;
            let n = (line.length() / 0.25).ceil() as usize;
            for k in 0..=n {
                let p = line.point(line.length() * k as f64 / n as f64);
                if (0..3).any(|a| p[a] < lo || p[a] > self.dims[a] as f64 - 1.0 - lo) {
                    return bad(format!(
                        "bundle '{}' centerline leaves the brain box",
                        b.name
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BundleTruth {
    pub name: String,
    pub streamlines: Vec<Vec<Point3>>,
    pub mask: Vec<bool>,
    /// 1 = start cap, 2 = end cap, 0 elsewhere.
    pub caps: Vec<u8>,
}

impl BundleTruth {
    pub fn regions(&self) -> BundleRegions {
        BundleRegions {
            name: self.name.clone(),
            mask: self.mask.clone(),
            caps: self.caps.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub spec: PhantomSpec,
    /// Centerlines after geometry jitter.
    pub curves: Vec<CurveSpec>,
    pub grid: Grid,
    pub tensors: Vec<DiffusionTensor>,
    pub fa: Volume,
    pub odf: Volume,
    pub labels: LabelVolume,
    pub keypoints: Vec<Point3>,
    pub fixels: FixelMap,
    pub bundles: Vec<BundleTruth>,
}

/// Rician magnitude of `s` with Gaussian noise σ on both channels.
pub fn rician<R: Rng + ?Sized>(s: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return s;
    }
    let re = s + sigma * rng.sample::<f64, _>(StandardNormal);
    let im = sigma * rng.sample::<f64, _>(StandardNormal);
    (re * re + im * im).sqrt()
}

/// Signals of a weighted multi-compartment voxel (S0 = 1), returned as
/// `(b0, per-direction signals)`, both with Rician noise σ.
pub fn simulate_voxel<R: Rng + ?Sized>(
    compartments: &[(f64, DiffusionTensor)],
    scheme: &GradientScheme,
    sigma: f64,
    rng: &mut R,
) -> (f64, Vec<f64>) {
    let s0 = rician(1.0, sigma, rng);
    let s = scheme
        .entries()
        .iter()
        .map(|&(g, b)| {
            let clean: f64 = compartments
                .iter()
                .map(|(w, d)| w * (-b * d.quad(g)).exp())
                .sum();
            rician(clean, sigma, rng)
        })
        .collect();
    (s0, s)
}

/// Signal volume with the b0 image in channel 0, one noise stream per voxel.
pub fn simulate_signals(
    tensors: &[DiffusionTensor],
    grid: &Grid,
    scheme: &GradientScheme,
    sigma: f64,
    seed: u64,
) -> Result<Volume> {
    if tensors.len() != grid.n_voxels() {
        return Err(Error::Shape("tensor count does not match grid".into()));
    }
    let ch = scheme.len() + 1;
    let mut data = vec![0.0; tensors.len() * ch];
    data.par_chunks_mut(ch)
        .zip(tensors.par_iter())
        .enumerate()
        .for_each(|(idx, (out, d))| {
            let mut rng = rng::stream(seed, Domain::Noise, &[idx as u64]);
            let (s0, s) = simulate_voxel(&[(1.0, *d)], scheme, sigma, &mut rng);
            out[0] = s0;
            out[1..].copy_from_slice(&s);
        });
    Volume::new(*grid, ch, data)
}

/// Per-voxel log-linear tensor fit of a signal volume laid out as by
/// [`simulate_signals`].
pub fn fit_signals(signals: &Volume, scheme: &GradientScheme) -> Result<Vec<DiffusionTensor>> {
    if signals.channels() != scheme.len() + 1 {
        return Err(Error::Shape(
            "signal channels must be 1 + number of directions".into(),
        ));
    }
    let fitter = TensorFitter::new(scheme)?;
    Ok(signals
        .data()
        .par_chunks(signals.channels())
        .map(|v| fitter.fit(&v[1..], v[0]).tensor)
        .collect())
}

fn keypoints(grid: &Grid) -> Vec<Point3> {
    const FRACTIONS: [[f64; 3]; 5] = [
        [0.30, 0.30, 0.30],
        [0.70, 0.32, 0.36],
        [0.50, 0.72, 0.40],
        [0.34, 0.56, 0.70],
        [0.66, 0.60, 0.66],
    ];
    FRACTIONS
        .iter()
        .map(|f| grid.voxel_to_world([0, 1, 2].map(|a| f[a] * (grid.dims[a] - 1) as f64)))
        .collect()
}

/// Signed volume of the tetrahedron `(a, b, c, d)`.
pub fn tetra_volume(a: Point3, b: Point3, c: Point3, d: Point3) -> f64 {
    dot(sub(b, a), cross(sub(c, a), sub(d, a))) / 6.0
}

struct VoxelClass {
    wm: Vec<(usize, Vec3)>,
    caps: Vec<(usize, u8, Vec3)>,
}

fn prolate_tensor(md: f64, fa: f64, axis: Vec3) -> DiffusionTensor {
    let (e1, e2) = orthonormal_basis(axis);
    DiffusionTensor::from_eigen(prolate_eigenvalues(md, fa), [axis, e1, e2])
}

/// Samples the parallel curve at lateral offset `(a, b)` with consecutive
/// points `ds` voxels apart, from `s0` to at most `s1` along the centerline.
fn sample_offset_curve(
    line: &Centerline,
    a: f64,
    b: f64,
    s0: f64,
    s1: f64,
    ds: f64,
) -> Vec<Point3> {
    let at = |s: f64| line.offset_point(s, a, b);
    let mut pts = vec![at(s0)];
    let mut s = s0;
    loop {
        let p = *pts.last().expect("non-empty");
        let dist = |t: f64| crate::geom::norm(sub(at(t), p));
        let mut hi = s + ds;
        while dist(hi) < ds && hi < s1 + 4.0 * ds {
            hi += ds;
        }
        if dist(hi) < ds {
            break;
        }
        let mut lo = s;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if dist(mid) < ds {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if hi > s1 + 1e-9 {
            break;
        }
        s = hi;
        pts.push(at(s));
    }
    pts
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomDataset> {
    spec.validate()?;
    let mut jit_rng = rng::stream(spec.seed, Domain::Phantom, &[0]);
    let j = spec.geometry_jitter_vox;
    let shift: Vec3 = [0, 1, 2].map(|_| {
        if j > 0.0 {
            jit_rng.gen_range(-j..=j)
        } else {
            0.0
        }
    });
    let curves: Vec<CurveSpec> = spec
        .bundles
        .iter()
        .map(|b| CurveSpec {
            start: crate::geom::add(b.curve.start, shift),
            ..b.curve.clone()
        })
        .collect();
    {
        let mut check = spec.clone();
        for (b, c) in check.bundles.iter_mut().zip(&curves) {
            b.curve = c.clone();
        }
        check.validate()?;
    }
    let lines: Vec<Centerline> = curves.iter().map(Centerline::new).collect::<Result<_>>()?;
    let radii: Vec<f64> = spec
        .bundles
        .iter()
        .map(|b| b.radius_mm / spec.spacing_mm)
        .collect();
    let origin = spec.dims.map(|d| -((d - 1) as f64) / 2.0 * spec.spacing_mm);
    let grid = Grid::axis_aligned(spec.dims, [spec.spacing_mm; 3], origin)?;
    let n = grid.n_voxels();
    let cap = spec.cap_depth_vox;

    let classes: Vec<VoxelClass> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let v = grid.coords(idx).map(|x| x as f64);
            let mut c = VoxelClass {
                wm: Vec::new(),
                caps: Vec::new(),
            };
            for (bi, line) in lines.iter().enumerate() {
                let Some(tc) = line.tube_coord(v) else {
                    continue;
                };
                if tc.radial() > radii[bi] {
                    continue;
                }
                if tc.s < cap {
                    c.caps.push((bi, 1, tc.tangent));
                } else if tc.s > line.length() - cap {
                    c.caps.push((bi, 2, tc.tangent));
                } else {
                    c.wm.push((bi, tc.tangent));
                }
            }
            c
        })
        .collect();

    let m = spec.margin_vox;
    let mut labels = LabelVolume::filled(grid, Tissue::Background);
    let mut conflicts = 0usize;
    for (idx, c) in classes.iter().enumerate() {
        let [i, j, k] = grid.coords(idx);
        let inside = [i, j, k]
            .iter()
            .zip(spec.dims)
            .all(|(&x, d)| x >= m && x + m < d);
        let t = if !c.wm.is_empty() {
            conflicts += usize::from(!c.caps.is_empty());
            Tissue::Wm
        } else if let Some(&(bi, code, _)) = c.caps.first() {
            let b = &spec.bundles[bi];
            if code == 1 {
                b.start_cap.tissue()
            } else {
                b.end_cap.tissue()
            }
        } else if inside {
            Tissue::Csf
        } else {
            Tissue::Background
        };
        labels.labels_mut()[idx] = t;
    }
    if conflicts > 0 {
        log::warn!("{conflicts} voxels claimed by both WM and a GM cap; WM kept");
    }

    let scheme = GradientScheme::spiral(spec.n_directions, spec.b_value);
    let fitter = TensorFitter::new(&scheme)?;
    let fits: Vec<(DiffusionTensor, bool)> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let c = &classes[idx];
            let compartments: Vec<(f64, DiffusionTensor)> = match labels.labels()[idx] {
                Tissue::Background => return (DiffusionTensor::ZERO, false),
                Tissue::Wm => {
                    let k = c.wm.len();
                    c.wm.iter()
                        .enumerate()
                        .map(|(r, &(bi, t))| {
                            let w = if k == 1 {
                                1.0
                            } else if r == 0 {
                                spec.dominant_fraction
                            } else {
                                (1.0 - spec.dominant_fraction) / (k - 1) as f64
                            };
                            (w, prolate_tensor(spec.md_wm, spec.bundles[bi].fa, t))
                        })
                        .collect()
                }
                Tissue::Csf => vec![(
                    1.0,
                    DiffusionTensor::diag(spec.md_csf, spec.md_csf, spec.md_csf),
                )],
                _ => match c.caps.first() {
                    Some(&(_, _, t)) => vec![(1.0, prolate_tensor(spec.md_gm, spec.gm_fa, t))],
                    None => vec![(
                        1.0,
                        DiffusionTensor::diag(spec.md_gm, spec.md_gm, spec.md_gm),
                    )],
                },
            };
            let mut rng = rng::stream(spec.seed, Domain::Noise, &[idx as u64]);
            let (s0, s) = simulate_voxel(&compartments, &scheme, spec.noise_sigma, &mut rng);
            let fit = fitter.fit(&s, s0);
            (fit.tensor, fit.clamped > 0)
        })
        .collect();
    let clamped = fits.iter().filter(|f| f.1).count();
    if clamped > 0 {
        log::warn!("{clamped} voxels had nonpositive signals clamped before fitting");
    }
    let tensors: Vec<DiffusionTensor> = fits.into_iter().map(|f| f.0).collect();
    let fa = Volume::new(
        grid,
        1,
        tensors.par_iter().map(|t| t.fa()).collect(),
    )?;
    let odf = OdfProjector::default().odf_volume(grid, &tensors);

    let ds = spec.gt_step_mm / spec.spacing_mm;
    let bundles: Vec<BundleTruth> = spec
        .bundles
        .iter()
        .enumerate()
        .map(|(bi, b)| {
            let line = &lines[bi];
            let max_off = (radii[bi] - GT_INSET_VOX).max(0.0);
            let h = spec.gt_offset_step_vox;
            let kmax = (max_off / h).floor() as i64;
            let mut streamlines = Vec::new();
            for ia in -kmax..=kmax {
                for ib in -kmax..=kmax {
                    let (a, bo) = (ia as f64 * h, ib as f64 * h);
                    if a * a + bo * bo > max_off * max_off + 1e-9 {
                        continue;
                    }
                    let pts =
                        sample_offset_curve(line, a, bo, cap / 2.0, line.length() - cap / 2.0, ds);
                    streamlines.push(
                        pts.into_iter()
                            .map(|p| grid.voxel_to_world(p))
                            .collect::<Vec<_>>(),
                    );
                }
            }
            let refs: Vec<&[Point3]> = streamlines.iter().map(|s| s.as_slice()).collect();
            let dens = density_map(&refs, &grid);
            let mask =
                mask_from_density(&dens, &MaskRule::default()).expect("default rule is valid");
            let caps = classes
                .iter()
                .zip(labels.labels())
                .map(|(c, &t)| {
                    if t.is_gm() {
                        c.caps.iter().find(|x| x.0 == bi).map_or(0, |x| x.1)
                    } else {
                        0
                    }
                })
                .collect();
            BundleTruth {
                name: b.name.clone(),
                streamlines,
                mask,
                caps,
            }
        })
        .collect();

    // Fixel truth: tangents of every bundle whose reference streamlines cover
    // the voxel, dominant (lowest index) first.
    let mut fixels = FixelMap::empty(grid);
    for idx in 0..n {
        let v = grid.coords(idx).map(|x| x as f64);
        let mut dirs: Vec<Vec3> = Vec::new();
        for (bi, b) in bundles.iter().enumerate() {
            if !b.mask[idx] {
                continue;
            }
            let Some(tc) = lines[bi].tube_coord(v) else {
                continue;
            };
            if dirs
                .iter()
                .all(|d| axis_angle(*d, tc.tangent).to_degrees() > 5.0)
            {
                dirs.push(tc.tangent);
            }
        }
        let k = dirs.len();
        let f: Vec<Fixel> = dirs
            .into_iter()
            .enumerate()
            .map(|(r, d)| Fixel {
                dir: d,
                support: (k - r) as u32,
            })
            .collect();
        fixels.set(idx, &f);
    }

    Ok(PhantomDataset {
        spec: spec.clone(),
        curves,
        keypoints: keypoints(&grid),
        grid,
        tensors,
        fa,
        odf,
        labels,
        fixels,
        bundles,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleEntry {
    name: String,
    n_streamlines: usize,
    tracks: String,
    mask: String,
    caps: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    spec: PhantomSpec,
    curves: Vec<CurveSpec>,
    dims: [usize; 3],
    spacing_mm: f64,
    affine: [[f64; 4]; 3],
    keypoints: Vec<Point3>,
    tensor: String,
    fa: String,
    odf: String,
    labels: String,
    fixels: String,
    all_tracks: String,
    bundles: Vec<BundleEntry>,
}

pub const MANIFEST: &str = "manifest.json";

impl PhantomDataset {
    pub fn tensor_volume(&self) -> Volume {
        let data = self.tensors.iter().flat_map(|t| t.0).collect();
        Volume::new(self.grid, 6, data).expect("tensor volume shape")
    }

    pub fn regions(&self) -> Vec<BundleRegions> {
        self.bundles.iter().map(BundleTruth::regions).collect()
    }

    pub fn all_streamlines(&self) -> Vec<&[Point3]> {
        self.bundles
            .iter()
            .flat_map(|b| b.streamlines.iter().map(|s| s.as_slice()))
            .collect()
    }

    /// Writes NIfTI volumes, TCK tracks and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut put = |name: &str| {
            let p = dir.join(name);
            written.push(p.clone());
            p
        };
        write_nifti(&self.tensor_volume(), put("tensor.nii"), DataType::Float32)?;
        write_nifti(&self.fa, put("fa.nii"), DataType::Float32)?;
        write_nifti(&self.odf, put("odf.nii"), DataType::Float32)?;
        write_labels(&self.labels, put("labels.nii"))?;
        self.fixels.save(&put("fixels_truth.nii"))?;
        let props = vec![(
            "tractory_phantom_seed".to_string(),
            self.spec.seed.to_string(),
        )];
        write_tck(&put("gt.tck"), self.all_streamlines(), &props)?;
        let mut entries = Vec::new();
        for b in &self.bundles {
            let e = BundleEntry {
                name: b.name.clone(),
                n_streamlines: b.streamlines.len(),
                tracks: format!("gt_{}.tck", b.name),
                mask: format!("mask_{}.nii", b.name),
                caps: format!("caps_{}.nii", b.name),
            };
            write_tck(
                &put(&e.tracks),
                b.streamlines.iter().map(|s| s.as_slice()),
                &props,
            )?;
            let mask = b.mask.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            write_nifti(
                &Volume::new(self.grid, 1, mask)?,
                put(&e.mask),
                DataType::Uint8,
            )?;
            let caps = b.caps.iter().map(|&x| x as f64).collect();
            write_nifti(
                &Volume::new(self.grid, 1, caps)?,
                put(&e.caps),
                DataType::Uint8,
            )?;
            entries.push(e);
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            curves: self.curves.clone(),
            dims: self.grid.dims,
            spacing_mm: self.spec.spacing_mm,
            affine: *self.grid.affine.rows(),
            keypoints: self.keypoints.clone(),
            tensor: "tensor.nii".into(),
            fa: "fa.nii".into(),
            odf: "odf.nii".into(),
            labels: "labels.nii".into(),
            fixels: "fixels_truth.nii".into(),
            all_tracks: "gt.tck".into(),
            bundles: entries,
        };
        let mp = put(MANIFEST);
        std::fs::write(&mp, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io(&mp, e))?;
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST);
        let raw = std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
        let m: Manifest = serde_json::from_slice(&raw)?;
        let (tv, _) = read_nifti(dir.join(&m.tensor))?;
        if tv.channels() != 6 {
            return Err(Error::Shape("tensor volume must have 6 channels".into()));
        }
        let grid = *tv.grid();
        let tensors = tv
            .data()
            .chunks_exact(6)
            .map(|c| DiffusionTensor([c[0], c[1], c[2], c[3], c[4], c[5]]))
            .collect();
        let (fa, _) = read_nifti(dir.join(&m.fa))?;
        let (odf, _) = read_nifti(dir.join(&m.odf))?;
        let labels = read_labels(dir.join(&m.labels))?;
        let fixels = FixelMap::load(&dir.join(&m.fixels))?;
        for (what, g) in [
            ("fa", fa.grid()),
            ("odf", odf.grid()),
            ("labels", labels.grid()),
            ("fixels", fixels.grid()),
        ] {
            if !g.same_lattice(&grid) {
                return Err(Error::Shape(format!(
                    "{what} volume does not share the tensor grid"
                )));
            }
        }
        let mut bundles = Vec::new();
        for e in &m.bundles {
            let streamlines = read_tck(&dir.join(&e.tracks))?.streamlines;
            let (mask, _) = read_nifti(dir.join(&e.mask))?;
            let (caps, _) = read_nifti(dir.join(&e.caps))?;
            bundles.push(BundleTruth {
                name: e.name.clone(),
                streamlines,
                mask: mask.data().iter().map(|&x| x > 0.0).collect(),
                caps: caps.data().iter().map(|&x| x as u8).collect(),
            });
        }
        Ok(PhantomDataset {
            spec: m.spec,
            curves: m.curves,
            grid,
            tensors,
            fa,
            odf,
            labels,
            keypoints: m.keypoints,
            fixels,
            bundles,
        })
    }
}

#[cfg(test)]
mod tests;
