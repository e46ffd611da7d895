//! Streamline propagation with anatomical accept/reject rules.
//!
//! Seeds sit on cortical GM voxels facing WM. Each launch is jittered, then
//! stepped along directions drawn from vMF(μ, α·FA²) where μ comes from a
//! [`Predictor`]. Streamlines must cross into WM and end in GM to be kept.

mod tck;

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dwimath::DiffusionTensor;
use crate::error::{Error, Result};
use crate::geom::{add, angle, dot, normalize, scale, Vec3};
use crate::rng::{self, Domain, Stream};
use crate::vmf;
use crate::volume::{Grid, LabelVolume, Point3, Tissue, Volume};

pub use tck::{decode_tck, encode_tck, read_tck, write_tck, TckFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub step_mm: f64,
    pub lookahead_vox: f64,
    pub alphas: Vec<f64>,
    pub seeds_per_voxel: usize,
    pub jitter_pos_mm: f64,
    pub jitter_angle_deg: f64,
    pub max_length_mm: f64,
    /// Defaults to `ceil(max_length_mm / step_mm)`.
    pub max_steps: Option<usize>,
    /// GM points tolerated before the streamline first reaches WM.
    pub startup_steps: usize,
    pub seed: u64,
    pub fact_fa_threshold: f64,
    pub fact_max_angle_deg: f64,
    pub keep_rejected: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            step_mm: 0.6,
            lookahead_vox: 0.5,
            alphas: vec![1600.0, 3200.0, 6400.0],
            seeds_per_voxel: 5,
            jitter_pos_mm: 0.6,
            jitter_angle_deg: 30.0,
            max_length_mm: 130.0,
            max_steps: None,
            startup_steps: 4,
            seed: 0,
            fact_fa_threshold: 0.10,
            fact_max_angle_deg: 45.0,
            keep_rejected: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(m));
        if !(self.step_mm > 0.0 && self.step_mm.is_finite()) {
            return bad(format!("step_mm must be > 0, got {}", self.step_mm));
        }
        if self.alphas.is_empty() {
            return bad("alphas must not be empty".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return bad(format!("alpha values must be > 0, got {a}"));
        }
        if self.seeds_per_voxel == 0 {
            return bad("seeds_per_voxel must be >= 1".into());
        }
        if !(self.jitter_pos_mm >= 0.0)
            || !(self.jitter_angle_deg >= 0.0)
            || !(self.lookahead_vox >= 0.0)
        {
            return bad("jitter ranges and look-ahead must be >= 0".into());
        }
        if !(self.max_length_mm > 0.0) {
            return bad(format!(
                "max_length_mm must be > 0, got {}",
                self.max_length_mm
            ));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1".into());
        }
        Ok(())
    }

    pub fn resolved_max_steps(&self) -> usize {
        self.max_steps
            .unwrap_or((self.max_length_mm / self.step_mm).ceil() as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Accepted,
    RejectedCsf,
    RejectedOutside,
    RejectedLength,
    RejectedMaxsteps,
    /// Terminated inside WM or GM by a predictor stop rule.
    RejectedStopped,
    /// The predictor produced no usable direction.
    RejectedPredictor,
}

impl Status {
    pub const ALL: [Status; 7] = [
        Status::Accepted,
        Status::RejectedCsf,
        Status::RejectedOutside,
        Status::RejectedLength,
        Status::RejectedMaxsteps,
        Status::RejectedStopped,
        Status::RejectedPredictor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Accepted => "accepted",
            Status::RejectedCsf => "rejected-csf",
            Status::RejectedOutside => "rejected-outside",
            Status::RejectedLength => "rejected-length",
            Status::RejectedMaxsteps => "rejected-maxsteps",
            Status::RejectedStopped => "rejected-stopped",
            Status::RejectedPredictor => "rejected-predictor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub voxel: [usize; 3],
    pub point: Point3,
    pub dir: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed_index: usize,
    pub seed_voxel: [usize; 3],
    pub repeat: usize,
    pub alpha: f64,
    pub alpha_index: usize,
    pub stream_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    pub points: Vec<Point3>,
    pub status: Status,
    pub provenance: Provenance,
}

/// Read-only inputs shared by every tracking worker.
#[derive(Debug, Clone)]
pub struct TrackingVolumes {
    pub labels: LabelVolume,
    pub fa: Volume,
}

impl TrackingVolumes {
    pub fn new(labels: LabelVolume, fa: Volume) -> Result<Self> {
        if !labels.grid().same_lattice(fa.grid()) || fa.channels() != 1 {
            return Err(Error::Shape(
                "labels and FA must share one grid; FA must be scalar".into(),
            ));
        }
        Ok(TrackingVolumes { labels, fa })
    }

    pub fn grid(&self) -> &Grid {
        self.labels.grid()
    }

    pub fn fa_at(&self, q: Point3) -> f64 {
        let mut v = [0.0];
        self.fa.interp_into(q, &mut v);
        v[0].clamp(0.0, 1.0)
    }
}

/// What a predictor sees at each step. Directions are world-frame unit vectors.
pub struct StepContext<'a> {
    pub point: Point3,
    pub voxel: Point3,
    /// `history[0]` is the launch direction, `history[k]` the k-th step.
    pub history: &'a [Vec3],
    pub reached_wm: bool,
}

impl StepContext<'_> {
    pub fn last_dir(&self) -> Vec3 {
        *self
            .history
            .last()
            .expect("history starts with the launch direction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Direction(Vec3),
    Stop,
    Fail(String),
}

pub trait Predictor: Sync {
    fn predict(&self, ctx: &StepContext) -> Prediction;

    /// Deterministic predictors step along μ exactly (κ = ∞).
    fn deterministic(&self) -> bool {
        false
    }
}

/// Wraps a direction field `f(world point, last direction)`.
pub struct FieldPredictor<F> {
    pub field: F,
    pub deterministic: bool,
}

impl<F> Predictor for FieldPredictor<F>
where
    F: Fn(Point3, Vec3) -> Option<Vec3> + Sync,
{
    fn predict(&self, ctx: &StepContext) -> Prediction {
        match (self.field)(ctx.point, ctx.last_dir()) {
            Some(d) => Prediction::Direction(d),
            None => Prediction::Fail("field undefined".into()),
        }
    }

    fn deterministic(&self) -> bool {
        self.deterministic
    }
}

/// Principal-eigenvector following at the nearest voxel.
pub struct FactPredictor {
    grid: Grid,
    dirs: Vec<Option<Vec3>>,
    fa: Vec<f64>,
    fa_threshold: f64,
    cos_max_turn: f64,
}

impl FactPredictor {
    /// `tensors` in voxel order on `grid`; eigenvectors are mapped to world.
    pub fn new(grid: &Grid, tensors: &[DiffusionTensor], cfg: &TrackerConfig) -> Result<Self> {
        if tensors.len() != grid.n_voxels() {
            return Err(Error::Shape("tensor count does not match grid".into()));
        }
        let dirs = tensors
            .par_iter()
            .map(|t| {
                t.principal_dir()
                    .and_then(|d| normalize(grid.affine.direction_to_world(d)))
            })
            .collect();
        let fa = tensors.par_iter().map(|t| t.fa()).collect();
        Ok(FactPredictor {
            grid: *grid,
            dirs,
            fa,
            fa_threshold: cfg.fact_fa_threshold,
            cos_max_turn: cfg.fact_max_angle_deg.to_radians().cos(),
        })
    }

    /// Tensor volume with 6 channels ordered (xx, xy, xz, yy, yz, zz).
    pub fn from_volume(tensors: &Volume, cfg: &TrackerConfig) -> Result<Self> {
        if tensors.channels() != 6 {
            return Err(Error::Shape(format!(
                "tensor volume needs 6 channels, found {}",
                tensors.channels()
            )));
        }
        let t: Vec<DiffusionTensor> = tensors
            .data()
            .chunks_exact(6)
            .map(|c| DiffusionTensor([c[0], c[1], c[2], c[3], c[4], c[5]]))
            .collect();
        Self::new(tensors.grid(), &t, cfg)
    }
}

impl Predictor for FactPredictor {
    fn predict(&self, ctx: &StepContext) -> Prediction {
        let prev = ctx.last_dir();
        let Some([i, j, k]) = self.grid.nearest_voxel(ctx.voxel) else {
            return Prediction::Stop;
        };
        let idx = self.grid.index(i, j, k);
        let e = match self.dirs[idx] {
            Some(e) if self.fa[idx] >= self.fa_threshold => e,
            _ if !ctx.reached_wm => return Prediction::Direction(prev),
            _ => return Prediction::Stop,
        };
        let e = if dot(e, prev) < 0.0 {
            scale(e, -1.0)
        } else {
            e
        };
        if dot(e, prev) < self.cos_max_turn {
            return Prediction::Stop;
        }
        Prediction::Direction(e)
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// One seed per (cortical GM voxel, 6-connected WM neighbour) pair.
pub fn enumerate_seeds(labels: &LabelVolume) -> Vec<Seed> {
    const NBRS: [[i64; 3]; 6] = [
        [-1, 0, 0],
        [1, 0, 0],
        [0, -1, 0],
        [0, 1, 0],
        [0, 0, -1],
        [0, 0, 1],
    ];
    let g = labels.grid();
    let d = g.dims;
    let mut seeds = Vec::new();
    for idx in 0..g.n_voxels() {
        if labels.labels()[idx] != Tissue::CorticalGm {
            continue;
        }
        let [i, j, k] = g.coords(idx);
        let c = [i as f64, j as f64, k as f64];
        for n in NBRS {
            let (a, b, e) = (i as i64 + n[0], j as i64 + n[1], k as i64 + n[2]);
            if a < 0 || b < 0 || e < 0 || a >= d[0] as i64 || b >= d[1] as i64 || e >= d[2] as i64 {
                continue;
            }
            if labels.get(a as usize, b as usize, e as usize) != Tissue::Wm {
                continue;
            }
            let dir =
                normalize(
                    g.affine
                        .direction_to_world([n[0] as f64, n[1] as f64, n[2] as f64]),
                )
                .expect("affine is invertible");
            seeds.push(Seed {
                voxel: [i, j, k],
                point: g.voxel_to_world(c),
                dir,
            });
        }
    }
    if seeds.is_empty() {
        log::warn!("no cortical GM voxel borders WM; seed list is empty");
    }
    seeds
}

/// Polar/azimuthal angles of a unit vector (θ from +z).
pub fn to_spherical(u: Vec3) -> (f64, f64) {
    (u[2].clamp(-1.0, 1.0).acos(), u[1].atan2(u[0]))
}

pub fn from_spherical(theta: f64, phi: f64) -> Vec3 {
    [
        theta.sin() * phi.cos(),
        theta.sin() * phi.sin(),
        theta.cos(),
    ]
}

/// Uniform position jitter per axis plus uniform (Δθ, Δφ) direction jitter.
/// Draw order: Δx, Δy, Δz, Δθ, Δφ.
pub fn jitter_seed<R: Rng + ?Sized>(
    seed: &Seed,
    cfg: &TrackerConfig,
    rng: &mut R,
) -> (Point3, Vec3) {
    let mut uni = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let dp = [
        uni(cfg.jitter_pos_mm),
        uni(cfg.jitter_pos_mm),
        uni(cfg.jitter_pos_mm),
    ];
    let da = cfg.jitter_angle_deg.to_radians();
    let (dth, dph) = (uni(da), uni(da));
    if da == 0.0 {
        return (add(seed.point, dp), seed.dir);
    }
    let (th, ph) = to_spherical(seed.dir);
    let dir = normalize(from_spherical(th + dth, ph + dph)).unwrap_or(seed.dir);
    (add(seed.point, dp), dir)
}

/// Tracks one streamline from a jittered launch.
pub fn propagate<P: Predictor + ?Sized>(
    start: Point3,
    dir: Vec3,
    predictor: &P,
    vols: &TrackingVolumes,
    cfg: &TrackerConfig,
    alpha: f64,
    rng: &mut Stream,
) -> (Vec<Point3>, Status) {
    let grid = vols.grid();
    let labels = &vols.labels;
    let mut points = vec![start];
    let mut history = vec![dir];
    match labels.label_at_world(start) {
        Tissue::CorticalGm | Tissue::SubcorticalGm => {}
        Tissue::Csf => return (points, Status::RejectedCsf),
        Tissue::Background => return (points, Status::RejectedOutside),
        Tissue::Wm => return (points, Status::RejectedStopped),
    }
    let max_steps = cfg.resolved_max_steps();
    let mut length = 0.0;
    let mut reached_wm = false;
    let mut startup = 0usize;
    let mut p = start;
    loop {
        let q = grid.world_to_voxel(p);
        let ctx = StepContext {
            point: p,
            voxel: q,
            history: &history,
            reached_wm,
        };
        let prev = ctx.last_dir();
        let mu = match predictor.predict(&ctx) {
            Prediction::Direction(d) => match normalize(d) {
                Some(d) if d.iter().all(|x| x.is_finite()) => d,
                _ => return (points, Status::RejectedPredictor),
            },
            Prediction::Stop => return (points, Status::RejectedStopped),
            Prediction::Fail(msg) => {
                log::debug!("predictor failed: {msg}");
                return (points, Status::RejectedPredictor);
            }
        };
        let mu = if dot(mu, prev) < 0.0 {
            scale(mu, -1.0)
        } else {
            mu
        };
        let u = if predictor.deterministic() {
            mu
        } else {
            let kappa = vmf::kappa_from_fa(vols.fa_at(q), alpha);
            vmf::sample(mu, kappa, rng)
        };
        p = add(p, scale(u, cfg.step_mm));
        length += cfg.step_mm;
        points.push(p);
        history.push(u);
        if length > cfg.max_length_mm + 1e-9 {
            return (points, Status::RejectedLength);
        }
        match labels.label_at_world(p) {
            Tissue::Wm => {
                reached_wm = true;
                if history.len() > max_steps {
                    return (points, Status::RejectedMaxsteps);
                }
            }
            Tissue::CorticalGm | Tissue::SubcorticalGm => {
                if reached_wm {
                    return (points, Status::Accepted);
                }
                startup += 1;
                if startup > cfg.startup_steps || history.len() > max_steps {
                    return (points, Status::RejectedStopped);
                }
            }
            Tissue::Csf => return (points, Status::RejectedCsf),
            Tissue::Background => return (points, Status::RejectedOutside),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub launched: usize,
    pub counts: BTreeMap<String, usize>,
}

impl StatusCounts {
    fn new() -> Self {
        StatusCounts {
            launched: 0,
            counts: Status::ALL
                .iter()
                .map(|s| (s.as_str().to_string(), 0))
                .collect(),
        }
    }

    fn add(&mut self, s: Status) {
        self.launched += 1;
        *self.counts.entry(s.as_str().to_string()).or_default() += 1;
    }

    pub fn get(&self, s: Status) -> usize {
        self.counts.get(s.as_str()).copied().unwrap_or(0)
    }

    pub fn retention(&self) -> f64 {
        if self.launched == 0 {
            0.0
        } else {
            self.get(Status::Accepted) as f64 / self.launched as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaCounts {
    pub alpha: f64,
    #[serde(flatten)]
    pub counts: StatusCounts,
    pub retention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub n_seeds: usize,
    pub merged: StatusCounts,
    pub retention: f64,
    pub per_alpha: Vec<AlphaCounts>,
    pub config: TrackerConfig,
}

#[derive(Debug, Clone)]
pub struct Tractogram {
    /// Accepted streamlines (all launches when `keep_rejected` is set), in
    /// launch order: α, then seed, then repeat.
    pub streamlines: Vec<Streamline>,
    pub report: TrackingReport,
}

impl Tractogram {
    pub fn accepted(&self) -> impl Iterator<Item = &Streamline> {
        self.streamlines
            .iter()
            .filter(|s| s.status == Status::Accepted)
    }

    pub fn accepted_points(&self) -> Vec<&[Point3]> {
        self.accepted().map(|s| s.points.as_slice()).collect()
    }

    pub fn tck_properties(&self) -> Vec<(String, String)> {
        let c = &self.report.config;
        vec![
            ("tractory_seed".into(), c.seed.to_string()),
            ("tractory_step_mm".into(), c.step_mm.to_string()),
            ("tractory_alphas".into(), format!("{:?}", c.alphas)),
            (
                "tractory_launched".into(),
                self.report.merged.launched.to_string(),
            ),
        ]
    }

    pub fn write_tck(&self, path: &std::path::Path) -> Result<()> {
        write_tck(path, self.accepted_points(), &self.tck_properties())
    }
}

/// Launches `seeds × seeds_per_voxel × |α|` streamlines in parallel and merges
/// the results in launch order.
pub fn track_whole_brain<P: Predictor + ?Sized>(
    seeds: &[Seed],
    predictor: &P,
    vols: &TrackingVolumes,
    cfg: &TrackerConfig,
) -> Result<Tractogram> {
    cfg.validate()?;
    let reps = cfg.seeds_per_voxel;
    let per_alpha = seeds.len() * reps;
    let total = per_alpha * cfg.alphas.len();
    let results: Vec<Streamline> = (0..total)
        .into_par_iter()
        .map(|task| {
            let ai = task / per_alpha;
            let si = (task % per_alpha) / reps;
            let r = task % reps;
            let alpha = cfg.alphas[ai];
            let mut rng = rng::tracking_stream(cfg.seed, si as u64, r as u64, ai as u64);
            let (p0, d0) = jitter_seed(&seeds[si], cfg, &mut rng);
            let (points, status) = propagate(p0, d0, predictor, vols, cfg, alpha, &mut rng);
            Streamline {
                points,
                status,
                provenance: Provenance {
                    seed_index: si,
                    seed_voxel: seeds[si].voxel,
                    repeat: r,
                    alpha,
                    alpha_index: ai,
                    stream_id: rng::stream_id(Domain::Tracking, &[si as u64, r as u64, ai as u64]),
                },
            }
        })
        .collect();
    let mut merged = StatusCounts::new();
    let mut by_alpha: Vec<StatusCounts> = cfg.alphas.iter().map(|_| StatusCounts::new()).collect();
    for s in &results {
        merged.add(s.status);
        by_alpha[s.provenance.alpha_index].add(s.status);
    }
    let streamlines = if cfg.keep_rejected {
        results
    } else {
        results
            .into_iter()
            .filter(|s| s.status == Status::Accepted)
            .collect()
    };
    let per_alpha = cfg
        .alphas
        .iter()
        .zip(by_alpha)
        .map(|(&alpha, counts)| AlphaCounts {
            alpha,
            retention: counts.retention(),
            counts,
        })
        .collect();
    Ok(Tractogram {
        streamlines,
        report: TrackingReport {
            n_seeds: seeds.len(),
            retention: merged.retention(),
            merged,
            per_alpha,
            config: cfg.clone(),
        },
    })
}

/// Checks the anatomical contract of an accepted streamline: GM start, an
/// optional GM run, then only WM, ending in GM. Returns a description of the
/// first violation.
pub fn check_accepted(points: &[Point3], labels: &LabelVolume) -> std::result::Result<(), String> {
    let l: Vec<Tissue> = points.iter().map(|&p| labels.label_at_world(p)).collect();
    if l.len() < 3 {
        return Err("fewer than three points".into());
    }
    if !l[0].is_gm() || !l[l.len() - 1].is_gm() {
        return Err(format!("endpoints are {:?} and {:?}", l[0], l[l.len() - 1]));
    }
    let first_wm = l
        .iter()
        .position(|&t| t == Tissue::Wm)
        .ok_or("never enters WM")?;
    if let Some(bad) = l[..first_wm].iter().find(|t| !t.is_gm()) {
        return Err(format!("start run touches {bad:?}"));
    }
    if let Some(bad) = l[first_wm..l.len() - 1].iter().find(|&&t| t != Tissue::Wm) {
        return Err(format!("interior touches {bad:?}"));
    }
    Ok(())
}

/// Angle between consecutive step directions, used by tests and reports.
pub fn step_angles(points: &[Point3]) -> Vec<f64> {
    points
        .windows(3)
        .map(|w| angle(crate::geom::sub(w[1], w[0]), crate::geom::sub(w[2], w[1])))
        .collect()
}
