//! Lane representations and the per-lane geometric primitives.
//!
//! Coordinates are normalized to the frame: `x` in `[0, 1]` spans the width,
//! `y` in `[0, 1]` spans the height with `y = 1` at the bottom edge.
//! Proposals may leave the unit square while being optimized; callers that
//! care use [`LanePolyline::is_inside_unit`].

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{invalid, Error, Result};

/// Chord lengths at or below this are treated as degenerate: the
/// straightness ratio divides by the chord and is undefined there.
pub const CHORD_EPS: f64 = 1e-6;

/// A 2-D point in normalized coordinates.
pub type Point = [f64; 2];

/// Frame geometry in pixels. Only the extents are kept; there is no pixel
/// data anywhere in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Frame {
    pub width: u32,
    pub height: u32,
}

impl Frame {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("frame extents must be at least 1 pixel"));
        }
        Ok(Frame { width, height })
    }
}

/// An ordered list of `N >= 2` points describing one lane.
///
/// Point order is semantic: index 0 is the start of the lane, the last index
/// its end.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LanePolyline {
    points: Vec<Point>,
}

impl LanePolyline {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("a lane polyline needs at least 2 points"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(invalid("lane polyline coordinates must be finite"));
        }
        Ok(LanePolyline { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Number of points `N`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 2 by construction
    }

    pub fn start(&self) -> Point {
        self.points[0]
    }

    pub fn end(&self) -> Point {
        self.points[self.points.len() - 1]
    }

    /// True when every point lies inside the unit square (the normalized
    /// frame). Out-of-frame lanes are legal mid-optimization; this is the
    /// bounds check callers use to report on them.
    pub fn is_inside_unit(&self) -> bool {
        self.points
            .iter()
            .all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]))
    }
}

/// A cubic Bézier lane proposal: 4 control points plus a confidence logit.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BezierLane {
    pub control: [Point; 4],
    pub logit: f64,
}

impl BezierLane {
    pub fn new(control: [Point; 4], logit: f64) -> Self {
        BezierLane { control, logit }
    }
}

/// An image frame plus its `M >= 0` annotated lanes, all sharing one `N`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scene {
    pub frame: Frame,
    ground_truth: Vec<LanePolyline>,
}

impl Scene {
    pub fn new(frame: Frame, ground_truth: Vec<LanePolyline>) -> Result<Self> {
        if let Some(first) = ground_truth.first() {
            if ground_truth.iter().any(|g| g.len() != first.len()) {
                return Err(invalid("all ground-truth lanes must share the same N"));
            }
        }
        Ok(Scene { frame, ground_truth })
    }

    pub fn ground_truth(&self) -> &[LanePolyline] {
        &self.ground_truth
    }

    /// Number of annotated lanes `M`.
    pub fn n_lanes(&self) -> usize {
        self.ground_truth.len()
    }

    /// Shared point count of the annotations, `None` when `M = 0`.
    pub fn n_points(&self) -> Option<usize> {
        self.ground_truth.first().map(LanePolyline::len)
    }
}

/// `K` Bézier proposals under joint optimization, plus the sampling
/// resolution used to decode them into polylines.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProposalBank {
    pub lanes: Vec<BezierLane>,
    pub n_points: usize,
}

impl ProposalBank {
    pub fn new(lanes: Vec<BezierLane>, n_points: usize) -> Result<Self> {
        if lanes.is_empty() {
            return Err(invalid("proposal bank must hold at least one proposal"));
        }
        if n_points < 2 {
            return Err(invalid("proposal sampling needs n_points >= 2"));
        }
        Ok(ProposalBank { lanes, n_points })
    }

    /// Number of proposals `K`.
    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    /// Total differentiable parameter count: 8 control coordinates plus one
    /// logit per proposal.
    pub fn parameter_count(&self) -> usize {
        self.lanes.len() * 9
    }
}

/// A fixed linear map from 4 control points to `n` sampled points.
///
/// The cubic Bernstein basis is the default; any row-stochastic weight
/// matrix works, and because the map is linear its Jacobian is the weight
/// matrix itself — [`LinearSampler::backprop`] is just the transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSampler {
    weights: Vec<[f64; 4]>,
}

impl LinearSampler {
    /// Cubic Bernstein weights at the uniform parameters `t_i = i/(n-1)`.
    pub fn cubic_bernstein(n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(invalid("bezier sampling needs n_points >= 2"));
        }
        let last = (n_points - 1) as f64;
        let weights = (0..n_points)
            .map(|i| {
                let t = i as f64 / last;
                let s = 1.0 - t;
                [s * s * s, 3.0 * t * s * s, 3.0 * t * t * s, t * t * t]
            })
            .collect();
        Ok(LinearSampler { weights })
    }

    pub fn from_weights(weights: Vec<[f64; 4]>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(invalid("sampler needs at least 2 rows"));
        }
        if weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(invalid("sampler weights must be finite"));
        }
        Ok(LinearSampler { weights })
    }

    pub fn n_points(&self) -> usize {
        self.weights.len()
    }

    pub fn sample(&self, control: &[Point; 4]) -> LanePolyline {
        let points = self
            .weights
            .iter()
            .map(|w| {
                let mut p = [0.0; 2];
                for (wj, c) in w.iter().zip(control) {
                    p[0] += wj * c[0];
                    p[1] += wj * c[1];
                }
                p
            })
            .collect();
        // Bernstein rows are finite convex weights, so points stay finite.
        LanePolyline { points }
    }

    /// Pull per-sampled-point gradients back to control-point space.
    pub fn backprop(&self, point_grads: &[Point]) -> [Point; 4] {
        debug_assert_eq!(point_grads.len(), self.weights.len());
        let mut out = [[0.0; 2]; 4];
        for (w, g) in self.weights.iter().zip(point_grads) {
            for (j, wj) in w.iter().enumerate() {
                out[j][0] += wj * g[0];
                out[j][1] += wj * g[1];
            }
        }
        out
    }
}

/// Decode a Bézier proposal into an `n_points`-point polyline.
pub fn sample_bezier(lane: &BezierLane, n_points: usize) -> Result<LanePolyline> {
    Ok(LinearSampler::cubic_bernstein(n_points)?.sample(&lane.control))
}

/// Curve length over chord length, with its gradient per point.
///
/// The minimum value 1 is attained exactly by straight, monotonically
/// ordered polylines. Zero-length interior segments contribute zero length
/// and, by the subgradient-midpoint convention, zero gradient.
pub fn straightness_ratio(lane: &LanePolyline) -> Result<(f64, Vec<Point>)> {
    let pts = lane.points();
    let n = pts.len();
    let chord_vec = [pts[n - 1][0] - pts[0][0], pts[n - 1][1] - pts[0][1]];
    let chord = (chord_vec[0] * chord_vec[0] + chord_vec[1] * chord_vec[1]).sqrt();
    if chord <= CHORD_EPS {
        return Err(Error::DegenerateChord);
    }

    let mut length = 0.0;
    // d length / d point, before the quotient rule.
    let mut dlen = vec![[0.0; 2]; n];
    for i in 0..n - 1 {
        let d = [pts[i + 1][0] - pts[i][0], pts[i + 1][1] - pts[i][1]];
        let seg = (d[0] * d[0] + d[1] * d[1]).sqrt();
        length += seg;
        if seg > 0.0 {
            let u = [d[0] / seg, d[1] / seg];
            dlen[i + 1][0] += u[0];
            dlen[i + 1][1] += u[1];
            dlen[i][0] -= u[0];
            dlen[i][1] -= u[1];
        }
    }

    let value = length / chord;
    let chord_unit = [chord_vec[0] / chord, chord_vec[1] / chord];
    let mut grad = Vec::with_capacity(n);
    for (i, dl) in dlen.iter().enumerate() {
        let mut g = [dl[0] / chord, dl[1] / chord];
        // Chord only depends on the two endpoints.
        if i == 0 {
            g[0] += value / chord * chord_unit[0];
            g[1] += value / chord * chord_unit[1];
        } else if i == n - 1 {
            g[0] -= value / chord * chord_unit[0];
            g[1] -= value / chord * chord_unit[1];
        }
        grad.push(g);
    }
    Ok((value, grad))
}

/// Mean per-point L1 distance between two equal-length lanes:
/// `(1/2N) * sum(|dx| + |dy|)`. Symmetric, zero iff identical.
pub fn lane_l1_distance(a: &LanePolyline, b: &LanePolyline) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("lane L1 distance needs equal point counts"));
    }
    let sum: f64 = a
        .points()
        .iter()
        .zip(b.points())
        .map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs())
        .sum();
    Ok(sum / (2.0 * a.len() as f64))
}

/// Gradient of [`endpoint_distance`] with respect to the first lane's start
/// and end points. Interior points never contribute.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EndpointGrad {
    pub start: Point,
    pub end: Point,
}

/// L1 distance between the start points plus L1 distance between the end
/// points. The gradient is the coordinatewise sign, zero at exact ties.
pub fn endpoint_distance(p: &LanePolyline, g: &LanePolyline) -> (f64, EndpointGrad) {
    let (ps, pe) = (p.start(), p.end());
    let (gs, ge) = (g.start(), g.end());
    let value = (ps[0] - gs[0]).abs()
        + (ps[1] - gs[1]).abs()
        + (pe[0] - ge[0]).abs()
        + (pe[1] - ge[1]).abs();
    let grad = EndpointGrad {
        start: [sign(ps[0] - gs[0]), sign(ps[1] - gs[1])],
        end: [sign(pe[0] - ge[0]), sign(pe[1] - ge[1])],
    };
    (value, grad)
}

/// Subgradient-midpoint sign: 0 at 0.
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
