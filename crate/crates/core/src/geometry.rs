//! Planar geometry shared by the scenario generator and the closed-loop
//! harness: arc-length polylines, oriented boxes, separating-axis overlap and
//! constant-velocity time-to-collision.

use serde::{Deserialize, Serialize};

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Rigid 2-D pose used for world <-> local frame changes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading }
    }

    /// World point expressed in this pose's frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn heading_to_local(&self, h: f64) -> f64 {
        wrap_angle(h - self.heading)
    }
}

/// Polyline parameterised by arc length. Queries beyond either end
/// extrapolate along the first/last segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Path {
    /// Consecutive duplicate points are dropped. Panics with fewer than two
    /// distinct points.
    pub fn new(points: &[[f64; 2]]) -> Self {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(points.len());
        for p in points {
            if pts.last().is_none_or(|q: &[f64; 2]| (p[0] - q[0]).hypot(p[1] - q[1]) > 1e-9) {
                pts.push(*p);
            }
        }
        assert!(pts.len() >= 2, "path needs two distinct points");
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(cum.last().unwrap() + d);
        }
        Path { pts, cum }
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.pts
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment(&self, s: f64) -> usize {
        let n = self.pts.len() - 1;
        match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let i = self.segment(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let t = (s - self.cum[i]) / len;
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Arc length of the closest point and signed lateral offset (left of
    /// the direction of travel is positive).
    pub fn project(&self, p: [f64; 2]) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let last = self.pts.len() - 2;
        for i in 0..=last {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = self.cum[i + 1] - self.cum[i];
            let mut t = ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (len * len);
            if i > 0 {
                t = t.max(0.0);
            }
            if i < last {
                t = t.min(1.0);
            }
            let q = [a[0] + t * dx, a[1] + t * dy];
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if d < best.0 {
                let cross = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
                best = (d, self.cum[i] + t * len, if cross >= 0.0 { d } else { -d });
            }
        }
        (best.1, best.2)
    }

    /// Unsigned distance from `p` to the polyline segments (no extrapolation).
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let mut best = f64::INFINITY;
        for w in self.pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            best = best.min((p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy));
        }
        best
    }

    /// Resamples `n` points at spacing `step` starting at arc length `s0`.
    pub fn sample(&self, s0: f64, step: f64, n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|i| self.point_at(s0 + step * i as f64)).collect()
    }

    /// Polyline shifted laterally by `offset` (left positive).
    pub fn offset(&self, offset: f64) -> Path {
        let n = self.pts.len();
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let h = if i + 1 < n {
                    let (a, b) = (self.pts[i], self.pts[i + 1]);
                    (b[1] - a[1]).atan2(b[0] - a[0])
                } else {
                    let (a, b) = (self.pts[i - 1], self.pts[i]);
                    (b[1] - a[1]).atan2(b[0] - a[0])
                };
                [self.pts[i][0] - offset * h.sin(), self.pts[i][1] + offset * h.cos()]
            })
            .collect();
        Path::new(&pts)
    }
}

/// Oriented rectangle: center, heading of the length axis, full extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(x: f64, y: f64, heading: f64, length: f64, width: f64) -> Self {
        OrientedBox { x, y, heading, length, width }
    }

    pub fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let [u, v] = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let mut out = [[0.0; 2]; 4];
        for (k, (a, b)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].iter().enumerate() {
            out[k] = [
                self.x + a * hl * u[0] + b * hw * v[0],
                self.y + a * hl * u[1] + b * hw * v[1],
            ];
        }
        out
    }

    /// Half-extent of the box projected onto unit axis `n`.
    pub fn radius_along(&self, n: [f64; 2]) -> f64 {
        let [u, v] = self.axes();
        self.length / 2.0 * (u[0] * n[0] + u[1] * n[1]).abs() + self.width / 2.0 * (v[0] * n[0] + v[1] * n[1]).abs()
    }

    /// Point containment (closed box).
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [u, v] = self.axes();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        (dx * u[0] + dy * u[1]).abs() <= self.length / 2.0 && (dx * v[0] + dy * v[1]).abs() <= self.width / 2.0
    }

    /// Separating-axis overlap test. Touching boxes do not overlap.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let d = [other.x - self.x, other.y - self.y];
        let [a0, a1] = self.axes();
        let [b0, b1] = other.axes();
        for n in [a0, a1, b0, b1] {
            let dist = (d[0] * n[0] + d[1] * n[1]).abs();
            if dist >= self.radius_along(n) + other.radius_along(n) {
                return false;
            }
        }
        true
    }

    pub fn translated(&self, dx: f64, dy: f64) -> OrientedBox {
        OrientedBox { x: self.x + dx, y: self.y + dy, ..*self }
    }
}

/// Earliest `t` in `[0, horizon]` at which two boxes translating at constant
/// velocity overlap, in closed form over the four separating axes. `None`
/// when they never overlap within the horizon.
pub fn time_to_collision(a: &OrientedBox, va: [f64; 2], b: &OrientedBox, vb: [f64; 2], horizon: f64) -> Option<f64> {
    let d0 = [b.x - a.x, b.y - a.y];
    let w = [vb[0] - va[0], vb[1] - va[1]];
    let [a0, a1] = a.axes();
    let [b0, b1] = b.axes();
    let mut enter = f64::NEG_INFINITY;
    let mut exit = f64::INFINITY;
    for n in [a0, a1, b0, b1] {
        let r = a.radius_along(n) + b.radius_along(n);
        let c = d0[0] * n[0] + d0[1] * n[1];
        let s = w[0] * n[0] + w[1] * n[1];
        if s.abs() < 1e-12 {
            if c.abs() >= r {
                return None;
            }
            continue;
        }
        let (t1, t2) = ((-r - c) / s, (r - c) / s);
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        enter = enter.max(lo);
        exit = exit.min(hi);
    }
    if enter >= exit || exit <= 0.0 {
        return None;
    }
    let t = enter.max(0.0);
    (t <= horizon).then_some(t)
}

/// Smallest time-to-collision between `ego` and any object whose center
/// lies ahead of the ego's front-axle half plane; objects behind cannot be
/// hit by the ego driving forward. `None` when nothing is hit in the horizon.
pub fn forward_time_to_collision<'a>(
    ego: &OrientedBox,
    ego_vel: [f64; 2],
    others: impl IntoIterator<Item = (&'a OrientedBox, [f64; 2])>,
    horizon: f64,
) -> Option<f64> {
    let pose = Pose::new(ego.x, ego.y, ego.heading);
    others
        .into_iter()
        .filter(|(b, _)| pose.to_local([b.x, b.y])[0] > 0.0)
        .filter_map(|(b, vb)| time_to_collision(ego, ego_vel, b, vb, horizon))
        .min_by(f64::total_cmp)
}
