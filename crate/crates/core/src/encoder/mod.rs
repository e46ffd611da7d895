//! Per-step input features for the direction model.
//!
//! Feature volumes are computed once per subject ([`SubjectFeatures`]) and
//! shared read-only; [`SubjectFeatures::assemble`] then concatenates, for a
//! point `p` with direction history `H`:
//!
//! | slice      | content                                                       |
//! |------------|---------------------------------------------------------------|
//! | odf        | ODF maps F1, F2, F3 at `p` (+ 27 F1 neighbours if enabled)    |
//! | lookahead  | the same at `p + δ·u_prev` (neighbours only if enabled there) |
//! | history    | six strided previous directions                               |
//! | position   | normalised distances to five keypoints                        |
//! | seg        | segmentation maps S1, S2, S3 at `p`                           |
//! | fixel      | fixel maps X1, X2, X3 at `p` (+ the two raw fixel slots)      |

pub mod conv;
pub mod transformer;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use conv::{Conv3d, ConvPyramid, Scales};
pub use transformer::TransformerEncoder;

use crate::error::{Error, Result};
use crate::fixel::{fixels_at, FixelMap};
use crate::geom::{dot, normalize, Vec3};
use crate::volume::{
    neighborhood_indices, Grid, LabelVolume, Point3, Tissue, TrilinearStencil, Volume,
};

/// Number of ODF SH coefficients fed to the ODF encoder.
pub const ODF_CHANNELS: usize = 45;
/// Channels of the fixel field (two direction triplets).
pub const FIXEL_CHANNELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdfEncoderKind {
    Conv,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub odf_channels: [usize; 3],
    pub seg_channels: [usize; 3],
    pub fixel_channels: [usize; 3],
    pub odf_encoder: OdfEncoderKind,
    pub patch: usize,
    pub blocks: usize,
    pub units_per_block: usize,
    pub heads: usize,
    pub width: usize,
    pub history_slots: usize,
    pub lookahead_vox: f64,
    pub neighborhood: bool,
    pub neighborhood_at_lookahead: bool,
    pub raw_fixels: bool,
    /// Seed of the encoder weight initialisation.
    pub init_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            odf_channels: [8, 16, 32],
            seg_channels: [8, 16, 32],
            fixel_channels: [8, 16, 32],
            odf_encoder: OdfEncoderKind::Conv,
            patch: 8,
            blocks: 4,
            units_per_block: 3,
            heads: 4,
            width: 128,
            history_slots: 6,
            lookahead_vox: 0.5,
            neighborhood: false,
            neighborhood_at_lookahead: false,
            raw_fixels: true,
            init_seed: 0,
        }
    }
}

/// Slices of the assembled vector, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub odf: Range<usize>,
    pub lookahead: Range<usize>,
    pub history: Range<usize>,
    pub position: Range<usize>,
    pub seg: Range<usize>,
    pub fixel: Range<usize>,
}

impl FeatureConfig {
    /// Full-size channel plan (64, 128, 256) for the ODF encoder.
    pub fn full_scale() -> Self {
        FeatureConfig {
            odf_channels: [64, 128, 256],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let chans = [self.odf_channels, self.seg_channels, self.fixel_channels];
        if chans.iter().flatten().any(|&c| c == 0) {
            return Err(Error::Schema("encoder channels must be positive".into()));
        }
        if self.history_slots == 0 {
            return Err(Error::Schema("history_slots must be >= 1".into()));
        }
        if !(self.lookahead_vox >= 0.0) || !self.lookahead_vox.is_finite() {
            return Err(Error::Schema(
                "lookahead_vox must be finite and >= 0".into(),
            ));
        }
        if self.odf_encoder == OdfEncoderKind::Transformer {
            if self.patch < 4 || !self.patch.is_multiple_of(4) {
                return Err(Error::Schema(format!(
                    "patch must be a multiple of 4, got {}",
                    self.patch
                )));
            }
            if self.heads == 0
                || !self.width.is_multiple_of(self.heads)
                || self.blocks * self.units_per_block == 0
            {
                return Err(Error::Schema(
                    "transformer needs blocks, units and width divisible by heads".into(),
                ));
            }
        }
        Ok(())
    }

    fn odf_len(&self, neighbours: bool) -> usize {
        let c = self.odf_channels;
        c[0] + c[1] + c[2] + if neighbours { 27 * c[0] } else { 0 }
    }

    pub fn layout(&self) -> FeatureLayout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        FeatureLayout {
            odf: take(self.odf_len(self.neighborhood)),
            lookahead: take(self.odf_len(self.neighborhood_at_lookahead)),
            history: take(3 * self.history_slots),
            position: take(5),
            seg: take(self.seg_channels.iter().sum()),
            fixel: take(
                self.fixel_channels.iter().sum::<usize>()
                    + if self.raw_fixels { FIXEL_CHANNELS } else { 0 },
            ),
        }
    }

    pub fn feature_len(&self) -> usize {
        self.layout().fixel.end
    }
}

/// Encoder weights: ODF (conv or transformer), segmentation and fixel pyramids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoders {
    pub odf: ConvPyramid,
    pub transformer: Option<TransformerEncoder>,
    pub seg: ConvPyramid,
    pub fixel: ConvPyramid,
}

impl Encoders {
    pub fn random(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.init_seed;
        let transformer = match cfg.odf_encoder {
            OdfEncoderKind::Conv => None,
            OdfEncoderKind::Transformer => Some(TransformerEncoder::random(
                ODF_CHANNELS,
                cfg.patch,
                cfg.width,
                cfg.heads,
                cfg.blocks * cfg.units_per_block,
                cfg.odf_channels,
                s,
            )?),
        };
        Ok(Encoders {
            odf: ConvPyramid::random(ODF_CHANNELS, cfg.odf_channels, s, 1),
            transformer,
            seg: ConvPyramid::random(Tissue::COUNT, cfg.seg_channels, s, 2),
            fixel: ConvPyramid::random(FIXEL_CHANNELS, cfg.fixel_channels, s, 3),
        })
    }

    pub fn check(&self, cfg: &FeatureConfig) -> Result<()> {
        let bad = |m: &str| Err(Error::Checkpoint(m.to_string()));
        self.odf.validate()?;
        self.seg.validate()?;
        self.fixel.validate()?;
        if self.odf.in_channels() != ODF_CHANNELS || self.odf.out_channels() != cfg.odf_channels {
            return bad("ODF encoder shape does not match the feature config");
        }
        if self.seg.in_channels() != Tissue::COUNT || self.seg.out_channels() != cfg.seg_channels {
            return bad("segmentation encoder shape does not match the feature config");
        }
        if self.fixel.in_channels() != FIXEL_CHANNELS
            || self.fixel.out_channels() != cfg.fixel_channels
        {
            return bad("fixel encoder shape does not match the feature config");
        }
        match (&self.transformer, cfg.odf_encoder) {
            (None, OdfEncoderKind::Conv) => Ok(()),
            (Some(t), OdfEncoderKind::Transformer) => {
                t.validate()?;
                if t.channels != cfg.odf_channels
                    || t.patch != cfg.patch
                    || t.width != cfg.width
                    || t.heads != cfg.heads
                {
                    return bad("transformer shape does not match the feature config");
                }
                Ok(())
            }
            _ => bad("ODF encoder kind does not match the stored weights"),
        }
    }

    pub fn encode_odf(&self, odf: &Volume) -> Result<Scales> {
        match &self.transformer {
            Some(t) => t.encode(odf),
            None => self.odf.encode(odf),
        }
    }

    pub fn encode_segmentation(&self, labels: &LabelVolume) -> Result<Scales> {
        self.seg.encode(&labels.one_hot())
    }

    pub fn encode_fixels(&self, m: &FixelMap) -> Result<Scales> {
        self.fixel.encode(&m.to_volume())
    }
}

/// Everything a worker needs to assemble features for one subject.
#[derive(Debug, Clone)]
pub struct SubjectFeatures {
    pub cfg: FeatureConfig,
    pub grid: Grid,
    pub odf: Scales,
    pub seg: Scales,
    pub fixel: Scales,
    pub fixels: FixelMap,
    pub keypoints: Vec<Point3>,
}

impl SubjectFeatures {
    pub fn compute(
        cfg: &FeatureConfig,
        enc: &Encoders,
        odf: &Volume,
        labels: &LabelVolume,
        fixels: &FixelMap,
        keypoints: &[Point3],
    ) -> Result<Self> {
        enc.check(cfg)?;
        let grid = *labels.grid();
        if !grid.same_lattice(odf.grid()) || !grid.same_lattice(fixels.grid()) {
            return Err(Error::Shape(
                "ODF, labels and fixel map must share one grid".into(),
            ));
        }
        if odf.channels() != ODF_CHANNELS {
            return Err(Error::Shape(format!(
                "ODF volume needs {ODF_CHANNELS} channels, found {}",
                odf.channels()
            )));
        }
        if keypoints.len() != 5 {
            return Err(Error::Shape(format!(
                "expected 5 keypoints, got {}",
                keypoints.len()
            )));
        }
        Ok(SubjectFeatures {
            cfg: cfg.clone(),
            grid,
            odf: enc.encode_odf(odf)?,
            seg: enc.encode_segmentation(labels)?,
            fixel: enc.encode_fixels(fixels)?,
            fixels: fixels.clone(),
            keypoints: keypoints.to_vec(),
        })
    }

    /// Assemble the feature vector at world point `p` given the direction
    /// history (`history[0]` = launch direction, last = previous step).
    pub fn assemble(&self, p: Point3, history: &[Vec3], out: &mut Vec<f64>) {
        out.clear();
        let q = self.grid.world_to_voxel(p);
        let prev = history.last().copied().unwrap_or([0.0; 3]);
        interp_features(&self.odf, q, self.cfg.neighborhood, out);
        let qa = lookahead_point(
            q,
            self.grid.affine.direction_to_voxel(prev),
            self.cfg.lookahead_vox,
        );
        interp_features(&self.odf, qa, self.cfg.neighborhood_at_lookahead, out);
        out.extend(history_vector(history, self.cfg.history_slots));
        out.extend(position_vector(p, &self.keypoints));
        interp_features(&self.seg, q, false, out);
        interp_features(&self.fixel, q, false, out);
        if self.cfg.raw_fixels {
            let prev = if dot(prev, prev) > 0.0 {
                Some(prev)
            } else {
                None
            };
            let f = fixels_at(&self.fixels, q, prev);
            out.extend(f.iter().flatten());
        }
    }
}

/// Trilinear samples of F1 at `q`, F2 at `q/2`, F3 at `q/4`, then optionally
/// the 27 F1 voxel vectors around `q` in raster order, appended to `out`.
pub fn interp_features(s: &Scales, q: Point3, neighbours: bool, out: &mut Vec<f64>) {
    for (level, f) in s.f.iter().enumerate() {
        let k = (1usize << level) as f64;
        let st = TrilinearStencil::new(f.dims(), q.map(|v| v / k));
        let start = out.len();
        out.resize(start + f.channels(), 0.0);
        f.apply_stencil(&st, &mut out[start..]);
    }
    if neighbours {
        for idx in neighborhood_indices(s.f[0].dims(), q) {
            out.extend_from_slice(s.f[0].voxel(idx));
        }
    }
}

/// `q + δ·u/‖u‖` in voxel units; `q` itself when `u` is zero.
pub fn lookahead_point(q: Point3, u: Vec3, delta: f64) -> Point3 {
    match normalize(u) {
        Some(u) => [
            q[0] + delta * u[0],
            q[1] + delta * u[1],
            q[2] + delta * u[2],
        ],
        None => q,
    }
}

/// Distances to the keypoints normalised to sum to one. A point on a keypoint
/// gets zero there and the rest renormalised.
pub fn position_vector(p: Point3, keypoints: &[Point3]) -> Vec<f64> {
    let r: Vec<f64> = keypoints
        .iter()
        .map(|c| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .collect();
    let s: f64 = r.iter().sum();
    if s > 0.0 {
        r.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / keypoints.len() as f64; keypoints.len()]
    }
}

/// Slot `j` holds `history[max(0, i - 2j)]` where `i` is the last index, so
/// slots run over the previous step, the one three back, five back, and so
/// on, padded with the launch direction.
pub fn history_vector(history: &[Vec3], slots: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * slots);
    if history.is_empty() {
        out.resize(3 * slots, 0.0);
        return out;
    }
    let i = history.len() - 1;
    for j in 0..slots {
        out.extend_from_slice(&history[i.saturating_sub(2 * j)]);
    }
    out
}
