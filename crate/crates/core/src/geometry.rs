//! Planar rigid-body geometry: SE(2) poses and transforms, oriented boxes,
//! exact convex-polygon intersection, IoU, and non-maximum suppression.
//!
//! Conventions used across the crate:
//! - world axes: x right, y up; angles counter-clockwise in radians,
//!   normalized to the half-open interval `(-pi, pi]`;
//! - a [`Pose2`] is a frame: applying it maps local coordinates to world
//!   coordinates;
//! - an [`OrientedBox`] has its length along the local x axis of its heading.

use serde::{Deserialize, Serialize};

/// Tolerance for half-plane inclusion during polygon clipping.
const CLIP_EPS: f64 = 1e-12;
/// Areas below this are treated as degenerate (zero) in IoU computations.
const AREA_EPS: f64 = 1e-12;

/// Normalize an angle to `(-pi, pi]`.
#[inline]
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    std::f64::consts::PI - (std::f64::consts::PI - theta).rem_euclid(two_pi)
}

/// A planar pose `(x, y, theta)`: position plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 { x, y, theta: wrap_angle(theta) }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// A rigid transform of the plane: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE2Transform {
    /// Rotation angle in radians, normalized to `(-pi, pi]`.
    pub rot: f64,
    /// Translation applied after the rotation.
    pub trans: [f64; 2],
}

impl SE2Transform {
    pub fn identity() -> Self {
        SE2Transform { rot: 0.0, trans: [0.0, 0.0] }
    }

    pub fn new(rot: f64, trans: [f64; 2]) -> Self {
        SE2Transform { rot: wrap_angle(rot), trans }
    }

    /// The transform mapping `pose`-local coordinates to world coordinates.
    pub fn from_pose(pose: &Pose2) -> Self {
        SE2Transform { rot: wrap_angle(pose.theta), trans: [pose.x, pose.y] }
    }

    /// Apply to a point.
    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rot.sin_cos();
        [c * p[0] - s * p[1] + self.trans[0], s * p[0] + c * p[1] + self.trans[1]]
    }

    /// Apply to a pose (rotates the heading as well).
    pub fn apply_pose(&self, p: &Pose2) -> Pose2 {
        let [x, y] = self.apply([p.x, p.y]);
        Pose2::new(x, y, p.theta + self.rot)
    }

    /// Composition: applying the result equals applying `other`, then `self`.
    pub fn compose(&self, other: &SE2Transform) -> SE2Transform {
        let (s, c) = self.rot.sin_cos();
        SE2Transform {
            rot: wrap_angle(self.rot + other.rot),
            trans: [
                c * other.trans[0] - s * other.trans[1] + self.trans[0],
                s * other.trans[0] + c * other.trans[1] + self.trans[1],
            ],
        }
    }

    pub fn invert(&self) -> SE2Transform {
        let (s, c) = self.rot.sin_cos();
        // R(-rot) * (-trans)
        SE2Transform {
            rot: wrap_angle(-self.rot),
            trans: [
                -(c * self.trans[0] + s * self.trans[1]),
                -(-s * self.trans[0] + c * self.trans[1]),
            ],
        }
    }
}

/// Express `target` in the frame of `reference`.
///
/// With `reference = (0, 0, 90 deg)` and `target = (3, 4, 0)`, the result is
/// `(4, -3, -90 deg)`: the relative pose seen from the reference frame.
pub fn se2_relative(reference: &Pose2, target: &Pose2) -> Pose2 {
    SE2Transform::from_pose(reference).invert().apply_pose(target)
}

/// Inverse of [`se2_relative`]: map a `reference`-local pose back to world.
pub fn se2_embed(reference: &Pose2, local: &Pose2) -> Pose2 {
    SE2Transform::from_pose(reference).apply_pose(local)
}

/// The transform taking coordinates local to `from` into coordinates local
/// to `to` (both poses given in the same world frame).
pub fn se2_between(from: &Pose2, to: &Pose2) -> SE2Transform {
    SE2Transform::from_pose(to).invert().compose(&SE2Transform::from_pose(from))
}

/// A rectangle with an orientation: center, extents, heading.
///
/// `length` runs along the heading direction, `width` across it. Both must be
/// positive for area computations to be meaningful; degenerate boxes are
/// handled defensively (IoU 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub length: f64,
    pub width: f64,
    pub heading: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, heading: f64) -> Self {
        OrientedBox { center: [cx, cy], length, width, heading: wrap_angle(heading) }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.center[0], self.center[1], self.heading)
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Corners in counter-clockwise order, starting at the front-left.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let rot = |x: f64, y: f64| {
            [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y]
        };
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }

    /// Map a world point into the box frame.
    #[inline]
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [lx, ly] = self.to_local(p);
        lx.abs() <= 0.5 * self.length && ly.abs() <= 0.5 * self.width
    }

    /// Strict-interior containment (boundary excluded).
    pub fn strictly_contains(&self, p: [f64; 2]) -> bool {
        let [lx, ly] = self.to_local(p);
        lx.abs() < 0.5 * self.length && ly.abs() < 0.5 * self.width
    }

    /// Distance from a point to the box outline (zero on the outline).
    pub fn boundary_distance(&self, p: [f64; 2]) -> f64 {
        let corners = self.corners();
        let mut best = f64::INFINITY;
        for i in 0..4 {
            let d = point_segment_distance(p, corners[i], corners[(i + 1) % 4]);
            best = best.min(d);
        }
        best
    }
}

#[inline]
fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Signed area of a simple polygon (positive when counter-clockwise).
fn polygon_signed_area(pts: &[[f64; 2]]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

/// Clip a convex `subject` polygon by a convex counter-clockwise `clip`
/// polygon (Sutherland–Hodgman). Returns the intersection polygon.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let p_in = cross(a, b, p) >= -CLIP_EPS;
            let q_in = cross(a, b, q) >= -CLIP_EPS;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                // Intersection of segment pq with the clip edge's line.
                let d = [q[0] - p[0], q[1] - p[1]];
                let e = [b[0] - a[0], b[1] - a[1]];
                let denom = e[0] * d[1] - e[1] * d[0];
                if denom.abs() > 0.0 {
                    let t = (e[0] * (a[1] - p[1]) - e[1] * (a[0] - p[0])) / denom;
                    output.push([p[0] + t * d[0], p[1] + t * d[1]]);
                }
            }
        }
    }
    output
}

/// Exact intersection area of two oriented boxes.
pub fn box_intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    if a.area() <= AREA_EPS || b.area() <= AREA_EPS {
        return 0.0;
    }
    let inter = clip_convex(&a.corners(), &b.corners());
    polygon_signed_area(&inter).abs()
}

/// Intersection-over-union of two oriented boxes.
///
/// Degenerate (zero-area) boxes have IoU 0 with everything; identical boxes
/// have IoU 1.
pub fn box_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= AREA_EPS || area_b <= AREA_EPS {
        return 0.0;
    }
    let inter = box_intersection_area(a, b);
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited in order of decreasing score (ties broken by lower
/// index); a candidate is kept iff its IoU with every already-kept box is at
/// most `iou_threshold`. Returns kept indices in visit order.
pub fn nms(boxes: &[OrientedBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores must align");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j].partial_cmp(&scores[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    'outer: for &i in &order {
        for &k in &kept {
            if box_iou(&boxes[i], &boxes[k]) > iou_threshold {
                continue 'outer;
            }
        }
        kept.push(i);
    }
    kept
}

/// First nonnegative ray parameter `t` with `origin + t*dir` on segment `ab`,
/// if the ray hits it.
pub fn ray_segment_t(origin: [f64; 2], dir: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Option<f64> {
    let e = [b[0] - a[0], b[1] - a[1]];
    let denom = e[0] * dir[1] - e[1] * dir[0];
    if denom.abs() < 1e-15 {
        return None;
    }
    let m = [a[0] - origin[0], a[1] - origin[1]];
    let t = (e[0] * m[1] - e[1] * m[0]) / denom;
    let u = (dir[0] * m[1] - dir[1] * m[0]) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}
