//! Planar geometry shared by the map, engine, sensing and metrics.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Counter-clockwise rotation.
    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Left-hand normal.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub const fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Maps a point expressed in this pose's frame into the parent frame.
    pub fn to_world(&self, local: Vec2) -> Vec2 {
        local.rotate(self.yaw) + self.position()
    }

    /// Maps a parent-frame point into this pose's frame.
    pub fn to_local(&self, world: Vec2) -> Vec2 {
        (world - self.position()).rotate(-self.yaw)
    }

    pub fn compose(&self, child: &Pose2) -> Pose2 {
        let p = self.to_world(child.position());
        Pose2::new(p.x, p.y, wrap_angle(self.yaw + child.yaw))
    }

    pub fn inverse(&self) -> Pose2 {
        let p = (-self.position()).rotate(-self.yaw);
        Pose2::new(p.x, p.y, wrap_angle(-self.yaw))
    }
}

/// Oriented rectangle in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vec2,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(center: Vec2, length: f64, width: f64, yaw: f64) -> Self {
        Self {
            center,
            length,
            width,
            yaw,
        }
    }

    pub fn axes(&self) -> (Vec2, Vec2) {
        let u = Vec2::from_angle(self.yaw);
        (u, u.perp())
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Vec2; 4] {
        let (u, v) = self.axes();
        let hl = u * (self.length * 0.5);
        let hw = v * (self.width * 0.5);
        let c = self.center;
        [c + hl + hw, c - hl + hw, c - hl - hw, c + hl - hw]
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let (u, v) = self.axes();
        let d = p - self.center;
        d.dot(u).abs() <= self.length * 0.5 && d.dot(v).abs() <= self.width * 0.5
    }

    /// Closest point of the (filled) box to `p`.
    pub fn closest_point(&self, p: Vec2) -> Vec2 {
        let (u, v) = self.axes();
        let d = p - self.center;
        let a = d.dot(u).clamp(-self.length * 0.5, self.length * 0.5);
        let b = d.dot(v).clamp(-self.width * 0.5, self.width * 0.5);
        self.center + u * a + v * b
    }

    /// Separating-axis overlap test. Touching boxes count as overlapping.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let (u1, v1) = self.axes();
        let (u2, v2) = other.axes();
        let d = other.center - self.center;
        for axis in [u1, v1, u2, v2] {
            let r1 = self.half_extent_on(axis);
            let r2 = other.half_extent_on(axis);
            if d.dot(axis).abs() > r1 + r2 {
                return false;
            }
        }
        true
    }

    fn half_extent_on(&self, axis: Vec2) -> f64 {
        let (u, v) = self.axes();
        0.5 * self.length * u.dot(axis).abs() + 0.5 * self.width * v.dot(axis).abs()
    }

    pub fn overlaps_disc(&self, center: Vec2, radius: f64) -> bool {
        self.closest_point(center).dist(center) <= radius
    }

    /// True when the closed segment `a`–`b` touches the box.
    pub fn intersects_segment(&self, a: Vec2, b: Vec2) -> bool {
        let la = self.to_local(a);
        let lb = self.to_local(b);
        let hl = self.length * 0.5;
        let hw = self.width * 0.5;
        // Liang–Barsky clip against the axis-aligned local box.
        let d = lb - la;
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for (p, q) in [
            (-d.x, la.x + hl),
            (d.x, hl - la.x),
            (-d.y, la.y + hw),
            (d.y, hw - la.y),
        ] {
            if p == 0.0 {
                if q < 0.0 {
                    return false;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }

    fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.center).rotate(-self.yaw)
    }
}

/// Shoelace area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[Vec2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.cross(b);
    }
    0.5 * acc
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output: Vec<Vec2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b - a;
        let inside = |p: Vec2| edge.cross(p - a) >= 0.0;
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn line_intersection(p1: Vec2, p2: Vec2, a: Vec2, b: Vec2) -> Vec2 {
    let r = p2 - p1;
    let s = b - a;
    let denom = r.cross(s);
    if denom == 0.0 {
        return p1;
    }
    let t = (a - p1).cross(s) / denom;
    p1 + r * t
}

/// Area of intersection of two oriented boxes.
pub fn box_intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let poly = clip_convex(&a.corners(), &b.corners());
    polygon_area(&poly).abs()
}

/// Proper or touching intersection of segments `p1p2` and `q1q2`.
pub fn segments_intersect(p1: Vec2, p2: Vec2, q1: Vec2, q2: Vec2) -> Option<Vec2> {
    let r = p2 - p1;
    let s = q2 - q1;
    let denom = r.cross(s);
    if denom.abs() < 1e-15 {
        return None;
    }
    let t = (q1 - p1).cross(s) / denom;
    let u = (q1 - p1).cross(r) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some(p1 + r * t)
    } else {
        None
    }
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolylineProjection {
    pub segment: usize,
    /// Arc length of the foot point from the polyline start.
    pub station: f64,
    /// Signed lateral offset, left of travel direction positive.
    pub offset: f64,
    pub foot: Vec2,
    pub distance: f64,
}

/// Project `p` onto segment `a`–`b`; returns (parameter in [0,1], foot point).
pub fn project_on_segment(p: Vec2, a: Vec2, b: Vec2) -> (f64, Vec2) {
    let d = b - a;
    let len_sq = d.norm_sq();
    if len_sq == 0.0 {
        return (0.0, a);
    }
    let t = ((p - a).dot(d) / len_sq).clamp(0.0, 1.0);
    (t, a + d * t)
}

/// Cumulative arc length at each vertex.
pub fn cumulative_lengths(points: &[Vec2]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            acc += p.dist(points[i - 1]);
        }
        out.push(acc);
    }
    out
}

pub fn polyline_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Nearest-point projection over every segment; ties resolve to the earliest segment.
pub fn project_on_polyline(p: Vec2, points: &[Vec2], cumulative: &[f64]) -> Option<PolylineProjection> {
    let mut best: Option<PolylineProjection> = None;
    for i in 0..points.len().saturating_sub(1) {
        let a = points[i];
        let b = points[i + 1];
        let (t, foot) = project_on_segment(p, a, b);
        let dist = p.dist(foot);
        if best.map_or(true, |bp| dist < bp.distance) {
            let dir = b - a;
            let side = dir.cross(p - foot);
            let offset = if side >= 0.0 { dist } else { -dist };
            best = Some(PolylineProjection {
                segment: i,
                station: cumulative[i] + (cumulative[i + 1] - cumulative[i]) * t,
                offset,
                foot,
                distance: dist,
            });
        }
    }
    best
}

/// Point and tangent heading at arc length `s`; `s` beyond the end extrapolates
/// along the final segment, negative `s` clamps to the start.
pub fn point_at_station(points: &[Vec2], cumulative: &[f64], s: f64) -> (Vec2, f64) {
    debug_assert!(points.len() >= 2);
    let n = points.len();
    if s <= 0.0 {
        let h = (points[1] - points[0]).angle();
        return (points[0], h);
    }
    let total = cumulative[n - 1];
    if s >= total {
        let dir = points[n - 1] - points[n - 2];
        let h = dir.angle();
        return (points[n - 1] + Vec2::from_angle(h) * (s - total), h);
    }
    let i = match cumulative.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
        Ok(i) => i.min(n - 2),
        Err(i) => i - 1,
    };
    let seg = cumulative[i + 1] - cumulative[i];
    let t = if seg > 0.0 { (s - cumulative[i]) / seg } else { 0.0 };
    let h = (points[i + 1] - points[i]).angle();
    (points[i].lerp(points[i + 1], t), h)
}

/// Polyline cut to the arc-length interval `[s0, s1]`.
pub fn slice_polyline(points: &[Vec2], cumulative: &[f64], s0: f64, s1: f64) -> Vec<Vec2> {
    let total = *cumulative.last().unwrap_or(&0.0);
    let s0 = s0.clamp(0.0, total);
    let s1 = s1.clamp(s0, total);
    let mut out = vec![point_at_station(points, cumulative, s0).0];
    for (p, &c) in points.iter().zip(cumulative) {
        if c > s0 && c < s1 {
            out.push(*p);
        }
    }
    let end = point_at_station(points, cumulative, s1).0;
    if out.last().map_or(true, |l| l.dist(end) > 1e-12) {
        out.push(end);
    }
    out
}

/// Discrete Fréchet distance between two polylines (vertex couplings).
pub fn discrete_frechet(a: &[Vec2], b: &[Vec2]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            let d = pa.dist(*pb);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unit_squares_offset_half_have_third_iou() {
        let a = OrientedBox::new(Vec2::new(0.0, 0.0), 1.0, 1.0, 0.0);
        let b = OrientedBox::new(Vec2::new(0.5, 0.0), 1.0, 1.0, 0.0);
        let inter = box_intersection_area(&a, &b);
        assert!((inter - 0.5).abs() < 1e-12);
    }

    #[test]
    fn segment_box_clip() {
        let b = OrientedBox::new(Vec2::new(5.0, 0.0), 2.0, 2.0, 0.3);
        assert!(b.intersects_segment(Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)));
        assert!(!b.intersects_segment(Vec2::new(0.0, 3.0), Vec2::new(10.0, 3.0)));
        assert!(!b.intersects_segment(Vec2::new(0.0, 0.0), Vec2::new(3.0, 0.0)));
    }

    #[test]
    fn pose_inverse_roundtrip() {
        let p = Pose2::new(3.0, -2.0, 0.7);
        let q = p.compose(&p.inverse());
        assert!(q.x.abs() < 1e-12 && q.y.abs() < 1e-12 && q.yaw.abs() < 1e-12);
    }

    #[test]
    fn frechet_of_offset_lines() {
        let a: Vec<Vec2> = (0..10).map(|i| Vec2::new(i as f64, 0.0)).collect();
        let b: Vec<Vec2> = (0..10).map(|i| Vec2::new(i as f64, 1.0)).collect();
        assert!((discrete_frechet(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn station_extrapolates_past_end() {
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)];
        let cum = cumulative_lengths(&pts);
        let (p, h) = point_at_station(&pts, &cum, 12.0);
        assert_eq!(p, Vec2::new(12.0, 0.0));
        assert_eq!(h, 0.0);
    }
}
