//! Planar centerlines built from straight runs and circular turns, with
//! tube coordinates `(s, a, b)`: arc length, in-plane lateral offset and
//! out-of-plane offset. Offset curves `c(s) + a·n(s) + b·N` are parallel to
//! the centerline, so their tangent is `t(s)` everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, cross, dot, norm, normalize, scale, sub, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Piece {
    /// Straight run of the given length (voxels).
    Straight { length: f64 },
    /// Circular turn in the curve plane; positive angles turn towards `N × t`.
    Turn { radius: f64, angle_deg: f64 },
}

/// Centerline description in continuous voxel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub start: Vec3,
    pub direction: Vec3,
    pub plane_normal: Vec3,
    pub pieces: Vec<Piece>,
}

#[derive(Debug, Clone, Copy)]
enum Segment {
    Line {
        p0: Vec3,
        t: Vec3,
        len: f64,
    },
    Arc {
        c: Vec3,
        e1: Vec3,
        e2: Vec3,
        r: f64,
        sweep: f64,
        sgn: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeCoord {
    pub s: f64,
    pub a: f64,
    pub b: f64,
    pub tangent: Vec3,
}

impl TubeCoord {
    pub fn radial(&self) -> f64 {
        (self.a * self.a + self.b * self.b).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct Centerline {
    normal: Vec3,
    segments: Vec<(f64, Segment)>,
    length: f64,
}

impl Centerline {
    pub fn new(spec: &CurveSpec) -> Result<Self> {
        let n = normalize(spec.plane_normal)
            .ok_or_else(|| Error::InvalidArgument("curve plane normal is zero".into()))?;
        let mut t = normalize(spec.direction)
            .ok_or_else(|| Error::InvalidArgument("curve direction is zero".into()))?;
        if dot(n, t).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "curve direction must lie in the curve plane".into(),
            ));
        }
        if spec.pieces.is_empty() {
            return Err(Error::InvalidArgument("curve has no pieces".into()));
        }
        let mut p = spec.start;
        let mut s0 = 0.0;
        let mut segments = Vec::with_capacity(spec.pieces.len());
        for piece in &spec.pieces {
            match *piece {
                Piece::Straight { length } => {
                    if !(length > 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "straight length must be > 0, got {length}"
                        )));
                    }
                    segments.push((
                        s0,
                        Segment::Line {
                            p0: p,
                            t,
                            len: length,
                        },
                    ));
                    p = add(p, scale(t, length));
                    s0 += length;
                }
                Piece::Turn { radius, angle_deg } => {
                    if !(radius > 0.0) || angle_deg == 0.0 || angle_deg.abs() >= 360.0 {
                        return Err(Error::InvalidArgument(format!(
                            "turn needs radius > 0 and 0 < |angle| < 360, got {radius}, {angle_deg}"
                        )));
                    }
                    let sgn = angle_deg.signum();
                    let left = cross(n, t);
                    let c = add(p, scale(left, sgn * radius));
                    let e1 = scale(sub(p, c), 1.0 / radius);
                    let e2 = scale(cross(n, e1), sgn);
                    let sweep = angle_deg.abs().to_radians();
                    let seg = Segment::Arc {
                        c,
                        e1,
                        e2,
                        r: radius,
                        sweep,
                        sgn,
                    };
                    segments.push((s0, seg));
                    let len = radius * sweep;
                    p = seg_point(&seg, len);
                    t = seg_tangent(&seg, len);
                    s0 += len;
                }
            }
        }
        Ok(Centerline {
            normal: n,
            segments,
            length: s0,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    fn locate(&self, s: f64) -> (f64, &Segment) {
        let s = s.clamp(0.0, self.length);
        let i = self.segments.partition_point(|(s0, _)| *s0 <= s).max(1) - 1;
        let (s0, seg) = &self.segments[i];
        (s - s0, seg)
    }

    pub fn point(&self, s: f64) -> Vec3 {
        let (ls, seg) = self.locate(s);
        seg_point(seg, ls)
    }

    pub fn tangent(&self, s: f64) -> Vec3 {
        let (ls, seg) = self.locate(s);
        seg_tangent(seg, ls)
    }

    /// Point on the parallel curve with lateral offsets `(a, b)`.
    pub fn offset_point(&self, s: f64, a: f64, b: f64) -> Vec3 {
        let t = self.tangent(s);
        let lateral = cross(self.normal, t);
        add(self.point(s), add(scale(lateral, a), scale(self.normal, b)))
    }

    /// Tube coordinates of `x` with respect to the nearest segment whose
    /// parameter range contains the projection, if any.
    pub fn tube_coord(&self, x: Vec3) -> Option<TubeCoord> {
        const EPS: f64 = 1e-9;
        let mut best: Option<TubeCoord> = None;
        for (s0, seg) in &self.segments {
            let cand = match *seg {
                Segment::Line { p0, t, len } => {
                    let d = sub(x, p0);
                    let ls = dot(d, t);
                    if ls < -EPS || ls > len + EPS {
                        continue;
                    }
                    TubeCoord {
                        s: s0 + ls,
                        a: dot(d, cross(self.normal, t)),
                        b: dot(d, self.normal),
                        tangent: t,
                    }
                }
                Segment::Arc {
                    c,
                    e1,
                    e2,
                    r,
                    sweep,
                    sgn,
                } => {
                    let v = sub(x, c);
                    let b = dot(v, self.normal);
                    let vin = sub(v, scale(self.normal, b));
                    let rho = norm(vin);
                    if rho < EPS {
                        continue;
                    }
                    let mut th = dot(vin, e2).atan2(dot(vin, e1));
                    if th < -EPS {
                        th += 2.0 * std::f64::consts::PI;
                    }
                    if th > sweep + EPS {
                        continue;
                    }
                    let th = th.clamp(0.0, sweep);
                    TubeCoord {
                        s: s0 + r * th,
                        a: sgn * (r - rho),
                        b,
                        tangent: seg_tangent(seg, r * th),
                    }
                }
            };
            if best.is_none_or(|b| cand.radial() < b.radial()) {
                best = Some(cand);
            }
        }
        best
    }
}

fn seg_point(seg: &Segment, ls: f64) -> Vec3 {
    match *seg {
        Segment::Line { p0, t, .. } => add(p0, scale(t, ls)),
        Segment::Arc { c, e1, e2, r, .. } => {
            let th = ls / r;
            add(c, add(scale(e1, r * th.cos()), scale(e2, r * th.sin())))
        }
    }
}

fn seg_tangent(seg: &Segment, ls: f64) -> Vec3 {
    match *seg {
        Segment::Line { t, .. } => t,
        Segment::Arc { e1, e2, r, .. } => {
            let th = ls / r;
            add(scale(e1, -th.sin()), scale(e2, th.cos()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::angle;

    fn u_curve() -> Centerline {
        Centerline::new(&CurveSpec {
            start: [5.0, 10.0, 20.0],
            direction: [1.0, 0.0, 0.0],
            plane_normal: [0.0, 0.0, 1.0],
            pieces: vec![
                Piece::Straight { length: 10.0 },
                Piece::Turn {
                    radius: 12.0,
                    angle_deg: 180.0,
                },
                Piece::Straight { length: 10.0 },
            ],
        })
        .unwrap()
    }

    #[test]
    fn u_curve_geometry() {
        let c = u_curve();
        let l = 20.0 + 12.0 * std::f64::consts::PI;
        assert!((c.length() - l).abs() < 1e-12);
        let end = c.point(l);
        assert!(norm(sub(end, [5.0, 34.0, 20.0])) < 1e-9, "{end:?}");
        assert!(angle(c.tangent(l), [-1.0, 0.0, 0.0]) < 1e-9);
        let apex = c.point(10.0 + 6.0 * std::f64::consts::PI);
        assert!(norm(sub(apex, [27.0, 22.0, 20.0])) < 1e-9, "{apex:?}");
    }

    #[test]
    fn tube_coords_invert_offset_points() {
        let c = u_curve();
        for &s in &[0.5, 9.0, 15.0, 30.0, 45.0, 55.0] {
            for &(a, b) in &[(0.0, 0.0), (1.5, -0.5), (-2.0, 1.0)] {
                let x = c.offset_point(s, a, b);
                let tc = c.tube_coord(x).unwrap();
                assert!((tc.s - s).abs() < 1e-9, "s {s} -> {}", tc.s);
                assert!((tc.a - a).abs() < 1e-9 && (tc.b - b).abs() < 1e-9);
                assert!(angle(tc.tangent, c.tangent(s)) < 1e-9);
            }
        }
    }

    #[test]
    fn negative_turn_goes_right() {
        let c = Centerline::new(&CurveSpec {
            start: [0.0; 3],
            direction: [1.0, 0.0, 0.0],
            plane_normal: [0.0, 0.0, 1.0],
            pieces: vec![Piece::Turn {
                radius: 5.0,
                angle_deg: -90.0,
            }],
        })
        .unwrap();
        let end = c.point(c.length());
        assert!(norm(sub(end, [5.0, -5.0, 0.0])) < 1e-9);
        let x = c.offset_point(2.0, 1.0, 0.3);
        let tc = c.tube_coord(x).unwrap();
        assert!((tc.a - 1.0).abs() < 1e-9 && (tc.b - 0.3).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs() {
        let base = CurveSpec {
            start: [0.0; 3],
            direction: [1.0, 0.0, 0.0],
            plane_normal: [0.0, 0.0, 1.0],
            pieces: vec![],
        };
        assert!(Centerline::new(&base).is_err());
        let mut s = base.clone();
        s.pieces = vec![Piece::Straight { length: 1.0 }];
        s.plane_normal = [1.0, 0.0, 0.0];
        assert!(Centerline::new(&s).is_err());
    }
}
