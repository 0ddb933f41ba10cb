//! Planar arm kinematics, obstacle geometry and signed distances.
//!
//! Every link is a capsule (a segment with a radius). Obstacles are circles
//! and axis-aligned boxes. Signed distances are positive when separated and
//! negative inside, and every distance routine also reports its gradient with
//! respect to the segment endpoints so costs can be differentiated through the
//! kinematic chain.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, AddAssign, Deref, DerefMut, Mul, Neg, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::math::{cos, sin, sqrt};
use crate::{Error, Result};

/// Upper bound on the number of links; keeps kinematics on the stack.
pub const MAX_LINKS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    #[inline]
    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        sqrt(self.norm_sq())
    }

    /// Counter-clockwise quarter turn.
    #[inline]
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    #[inline]
    pub fn lerp(self, o: Vec2, s: f64) -> Vec2 {
        self + (o - self) * s
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    #[inline]
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

// Points are written as `[x, y]`.
impl Serialize for Vec2 {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        [self.x, self.y].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vec2 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let [x, y] = <[f64; 2]>::deserialize(d)?;
        Ok(Vec2 { x, y })
    }
}

/// A joint-angle vector in radians.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(pub Vec<f64>);

impl Configuration {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl Deref for Configuration {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Configuration {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Configuration {
    fn from(v: Vec<f64>) -> Self {
        Configuration(v)
    }
}

impl From<&[f64]> for Configuration {
    fn from(v: &[f64]) -> Self {
        Configuration(v.to_vec())
    }
}

/// A fixed-horizon sequence of waypoints, stored row-major (`len × dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid("trajectory", "data length is not a multiple of dim"));
        }
        if data.len() / dim < 2 {
            return Err(Error::invalid("trajectory", "needs at least two waypoints"));
        }
        Ok(Trajectory { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(dim, data)
    }

    /// Straight line from `a` to `b` with `len` evenly spaced waypoints.
    pub fn straight(a: &[f64], b: &[f64], len: usize) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
        if len < 2 {
            return Err(Error::invalid("trajectory", "needs at least two waypoints"));
        }
        let mut data = Vec::with_capacity(len * a.len());
        for t in 0..len {
            let s = t as f64 / (len - 1) as f64;
            for (x, y) in a.iter().zip(b) {
                data.push(if t == len - 1 { *y } else { x + (y - x) * s });
            }
        }
        Self::from_flat(a.len(), data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn first(&self) -> &[f64] {
        self.row(0)
    }

    pub fn last(&self) -> &[f64] {
        self.row(self.len() - 1)
    }
}

impl Serialize for Trajectory {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(self.len()))?;
        for r in self.rows() {
            seq.serialize_element(r)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Trajectory::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Planar serial arm: revolute joints, capsule links.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmModel {
    pub link_lengths: Vec<f64>,
    pub link_radius: f64,
    pub base: Vec2,
    pub joint_limits: Vec<(f64, f64)>,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self::planar_3link()
    }
}

impl ArmModel {
    pub fn new(
        link_lengths: Vec<f64>,
        link_radius: f64,
        base: Vec2,
        joint_limits: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let arm = ArmModel {
            link_lengths,
            link_radius,
            base,
            joint_limits,
        };
        arm.validate()?;
        Ok(arm)
    }

    /// Three links of 0.5, 0.4 and 0.3 m with 4 cm radius, joints limited to
    /// (−π + 0.05, π − 0.05).
    pub fn planar_3link() -> Self {
        let lim = core::f64::consts::PI - 0.05;
        ArmModel {
            link_lengths: vec![0.5, 0.4, 0.3],
            link_radius: 0.04,
            base: Vec2::ZERO,
            joint_limits: vec![(-lim, lim); 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.link_lengths.len();
        if d == 0 || d > MAX_LINKS {
            return Err(Error::invalid("arm", "link count must be in 1..=8"));
        }
        if self.link_lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::invalid("arm", "link lengths must be positive"));
        }
        if !(self.link_radius > 0.0) {
            return Err(Error::invalid("arm", "link radius must be positive"));
        }
        if self.joint_limits.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.joint_limits.len(),
            });
        }
        if self.joint_limits.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::invalid("arm", "joint limits need lo < hi"));
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof()
            && q.iter()
                .zip(&self.joint_limits)
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub(crate) fn check_dim(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Joint positions `P_0 = base, …, P_d = tip` written into `out[..=d]`.
    pub(crate) fn joint_points(&self, q: &[f64], out: &mut [Vec2; MAX_LINKS + 1]) {
        let mut theta = 0.0;
        let mut p = self.base;
        out[0] = p;
        for (i, (l, qi)) in self.link_lengths.iter().zip(q).enumerate() {
            theta += qi;
            p += Vec2::new(cos(theta), sin(theta)) * *l;
            out[i + 1] = p;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn center(&self) -> Vec2 {
        (self.min + self.max) * 0.5
    }

    pub fn half_extent(&self) -> Vec2 {
        (self.max - self.min) * 0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Obstacle {
    Circle { center: Vec2, radius: f64 },
    Box { min: Vec2, max: Vec2 },
}

impl Obstacle {
    pub fn circle(center: Vec2, radius: f64) -> Self {
        Obstacle::Circle { center, radius }
    }

    pub fn aabb(min: Vec2, max: Vec2) -> Self {
        Obstacle::Box { min, max }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Obstacle::Circle { center, radius } => {
                if !center.is_finite() || !(radius > 0.0) {
                    return Err(Error::invalid("circle", "radius must be positive"));
                }
            }
            Obstacle::Box { min, max } => {
                if !(min.x < max.x && min.y < max.y) {
                    return Err(Error::invalid("box", "min must be below max componentwise"));
                }
            }
        }
        Ok(())
    }

    /// Axis-aligned bounding box of the shape.
    pub fn bounds(&self) -> Aabb {
        match *self {
            Obstacle::Circle { center, radius } => Aabb::new(
                center - Vec2::new(radius, radius),
                center + Vec2::new(radius, radius),
            ),
            Obstacle::Box { min, max } => Aabb::new(min, max),
        }
    }

    /// Signed distance from a point to the shape with its gradient.
    pub fn point_sdf(&self, p: Vec2) -> (f64, Vec2) {
        match *self {
            Obstacle::Circle { center, radius } => {
                let d = p - center;
                let n = d.norm();
                let g = if n > 0.0 { d * (1.0 / n) } else { Vec2::ZERO };
                (n - radius, g)
            }
            Obstacle::Box { min, max } => box_sdf(min, max, p),
        }
    }
}

fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Box signed distance: Euclidean outside, distance to the nearest face inside.
fn box_sdf(min: Vec2, max: Vec2, p: Vec2) -> (f64, Vec2) {
    let c = (min + max) * 0.5;
    let h = (max - min) * 0.5;
    let d = p - c;
    let qx = d.x.abs() - h.x;
    let qy = d.y.abs() - h.y;
    if qx > 0.0 || qy > 0.0 {
        let ox = qx.max(0.0);
        let oy = qy.max(0.0);
        let n = sqrt(ox * ox + oy * oy);
        (n, Vec2::new(sign(d.x) * ox / n, sign(d.y) * oy / n))
    } else if qx > qy {
        (qx, Vec2::new(sign(d.x), 0.0))
    } else {
        (qy, Vec2::new(0.0, sign(d.y)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub fixtures: Vec<Obstacle>,
    pub objects: Vec<Obstacle>,
    pub bounds: Aabb,
}

impl Environment {
    pub fn empty(bounds: Aabb) -> Self {
        Environment {
            fixtures: Vec::new(),
            objects: Vec::new(),
            bounds,
        }
    }

    pub fn obstacles(&self) -> impl Iterator<Item = &Obstacle> {
        self.fixtures.iter().chain(self.objects.iter())
    }

    pub fn validate(&self) -> Result<()> {
        for o in self.obstacles() {
            o.validate()?;
            let b = o.bounds();
            if !(self.bounds.contains(b.min) && self.bounds.contains(b.max)) {
                return Err(Error::invalid("environment", "obstacle outside bounds"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vec2,
    pub b: Vec2,
    pub radius: f64,
}

/// Output of [`forward_kinematics`].
#[derive(Clone, Debug, PartialEq)]
pub struct ArmPose {
    pub links: Vec<Capsule>,
    pub tip: Vec2,
}

/// Link capsules and tip position for configuration `q`.
pub fn forward_kinematics(arm: &ArmModel, q: &[f64]) -> Result<ArmPose> {
    arm.check_dim(q)?;
    let mut pts = [Vec2::ZERO; MAX_LINKS + 1];
    arm.joint_points(q, &mut pts);
    let d = arm.dof();
    let links = (0..d)
        .map(|i| Capsule {
            a: pts[i],
            b: pts[i + 1],
            radius: arm.link_radius,
        })
        .collect();
    Ok(ArmPose { links, tip: pts[d] })
}

/// Tip position only.
pub fn tip_position(arm: &ArmModel, q: &[f64]) -> Result<Vec2> {
    arm.check_dim(q)?;
    let mut pts = [Vec2::ZERO; MAX_LINKS + 1];
    arm.joint_points(q, &mut pts);
    Ok(pts[arm.dof()])
}

/// Signed distance between a segment `[a, b]` and an obstacle, with the
/// gradient with respect to `a` and `b`.
pub(crate) fn segment_obstacle_sd(a: Vec2, b: Vec2, o: &Obstacle) -> (f64, Vec2, Vec2) {
    match *o {
        Obstacle::Circle { center, radius } => {
            let (s, p) = closest_on_segment(a, b, center);
            let d = p - center;
            let n = d.norm();
            let u = if n > 0.0 { d * (1.0 / n) } else { Vec2::ZERO };
            (n - radius, u * (1.0 - s), u * s)
        }
        Obstacle::Box { min, max } => segment_box_sd(a, b, min, max),
    }
}

fn closest_on_segment(a: Vec2, b: Vec2, p: Vec2) -> (f64, Vec2) {
    let ab = b - a;
    let l2 = ab.norm_sq();
    let s = if l2 > 0.0 {
        ((p - a).dot(ab) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (s, a + ab * s)
}

/// The box SDF restricted to a segment is convex and piecewise smooth; its
/// minimum lies at a segment end, at the projection of a box corner, or at a
/// kink of the interior (face-distance) branch. All candidates are evaluated.
#[derive(Clone, Copy)]
enum BoxCandidate {
    Plain,
    /// `d_x = 0` (axis 0) or `d_y = 0` (axis 1).
    Kink(usize),
    /// `|d_x| − h_x = |d_y| − h_y`.
    Cross,
}

fn segment_box_sd(a: Vec2, b: Vec2, min: Vec2, max: Vec2) -> (f64, Vec2, Vec2) {
    let c = (min + max) * 0.5;
    let h = (max - min) * 0.5;
    let ab = b - a;
    let mut cands = [(0.0f64, BoxCandidate::Plain); 16];
    let mut n = 0;
    let mut push = |s: f64, kind: BoxCandidate, n: &mut usize| {
        if (0.0..=1.0).contains(&s) {
            cands[*n] = (s, kind);
            *n += 1;
        }
    };
    push(0.0, BoxCandidate::Plain, &mut n);
    push(1.0, BoxCandidate::Plain, &mut n);
    for corner in [min, max, Vec2::new(min.x, max.y), Vec2::new(max.x, min.y)] {
        push(closest_on_segment(a, b, corner).0, BoxCandidate::Plain, &mut n);
    }
    let d0 = a - c;
    if ab.x != 0.0 {
        push(-d0.x / ab.x, BoxCandidate::Kink(0), &mut n);
        for off in [-h.x, h.x] {
            push((off - d0.x) / ab.x, BoxCandidate::Plain, &mut n);
        }
    }
    if ab.y != 0.0 {
        push(-d0.y / ab.y, BoxCandidate::Kink(1), &mut n);
        for off in [-h.y, h.y] {
            push((off - d0.y) / ab.y, BoxCandidate::Plain, &mut n);
        }
    }
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            let den = sx * ab.x - sy * ab.y;
            if den != 0.0 {
                push((sy * d0.y - h.y - sx * d0.x + h.x) / den, BoxCandidate::Cross, &mut n);
            }
        }
    }
    let mut best = (f64::INFINITY, 0.0, Vec2::ZERO, BoxCandidate::Plain);
    for &(s, kind) in &cands[..n] {
        let (v, g) = box_sdf(min, max, a + ab * s);
        if v < best.0 {
            best = (v, s, g, kind);
        }
    }
    let (v, s, g, kind) = best;
    if v < 0.0 {
        // Interior minima on a kink of `max(|d_x| − h_x, |d_y| − h_y)` move
        // with the kink; the plain point gradient does not apply there.
        let d = a + ab * s - c;
        let (qx, qy) = (d.x.abs() - h.x, d.y.abs() - h.y);
        match kind {
            BoxCandidate::Kink(0) if qx >= qy => return (v, Vec2::ZERO, Vec2::ZERO),
            BoxCandidate::Kink(1) if qy >= qx => return (v, Vec2::ZERO, Vec2::ZERO),
            BoxCandidate::Cross => {
                let (sx, sy) = (sign(d.x), sign(d.y));
                let (u1, w1) = (sx * ab.x, sy * ab.y);
                if u1 != w1 && u1 * w1 <= 0.0 {
                    let lam = w1 / (w1 - u1);
                    let dir = Vec2::new(lam * sx, (1.0 - lam) * sy);
                    return (v, dir * (1.0 - s), dir * s);
                }
            }
            _ => {}
        }
    }
    (v, g * (1.0 - s), g * s)
}

/// Distance between segments `[p1, q1]` and `[p2, q2]` with gradients with
/// respect to all four endpoints.
pub(crate) fn segment_segment_dist(
    p1: Vec2,
    q1: Vec2,
    p2: Vec2,
    q2: Vec2,
) -> (f64, [Vec2; 4]) {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_sq();
    let e = d2.norm_sq();
    let f = d2.dot(r);
    let eps = 1e-18;
    let (s, t);
    if a <= eps && e <= eps {
        s = 0.0;
        t = 0.0;
    } else if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let cc = d1.dot(r);
        if e <= eps {
            t = 0.0;
            s = (-cc / a).clamp(0.0, 1.0);
        } else {
            let bb = d1.dot(d2);
            let denom = a * e - bb * bb;
            let mut s0 = if denom > 0.0 {
                ((bb * f - cc * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (bb * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-cc / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((bb - cc) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    let c1 = p1 + d1 * s;
    let c2 = p2 + d2 * t;
    let diff = c1 - c2;
    let dist = diff.norm();
    let u = if dist > 0.0 {
        diff * (1.0 / dist)
    } else {
        Vec2::ZERO
    };
    (
        dist,
        [u * (1.0 - s), u * s, -u * (1.0 - t), -u * t],
    )
}

/// Signed distance between a capsule and an obstacle.
pub fn signed_distance(c: &Capsule, o: &Obstacle) -> f64 {
    segment_obstacle_sd(c.a, c.b, o).0 - c.radius
}

/// Signed distance between two capsules.
pub fn capsule_distance(c1: &Capsule, c2: &Capsule) -> f64 {
    segment_segment_dist(c1.a, c1.b, c2.a, c2.b).0 - c1.radius - c2.radius
}

/// Gradient of one pair distance with respect to the joint points it touches.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PairGrad {
    idx: [usize; 4],
    g: [Vec2; 4],
    n: usize,
}

impl PairGrad {
    /// `gp[idx] += w · g` for each touched joint point.
    #[inline]
    pub(crate) fn accumulate(&self, gp: &mut [Vec2; MAX_LINKS + 1], w: f64) {
        for k in 0..self.n {
            gp[self.idx[k]] += self.g[k] * w;
        }
    }
}

/// Visits every collision pair of a configuration: link–obstacle pairs first,
/// then non-adjacent link pairs. `pts[i]` is joint point `P_i`.
pub(crate) fn for_each_pair(
    arm: &ArmModel,
    env: &Environment,
    pts: &[Vec2; MAX_LINKS + 1],
    mut f: impl FnMut(f64, PairGrad),
) {
    let d = arm.dof();
    let r = arm.link_radius;
    for i in 0..d {
        let (a, b) = (pts[i], pts[i + 1]);
        for o in env.obstacles() {
            let (sd, ga, gb) = segment_obstacle_sd(a, b, o);
            f(
                sd - r,
                PairGrad {
                    idx: [i, i + 1, 0, 0],
                    g: [ga, gb, Vec2::ZERO, Vec2::ZERO],
                    n: 2,
                },
            );
        }
    }
    for i in 0..d {
        for j in (i + 2)..d {
            let (dist, g) = segment_segment_dist(pts[i], pts[i + 1], pts[j], pts[j + 1]);
            f(
                dist - 2.0 * r,
                PairGrad {
                    idx: [i, i + 1, j, j + 1],
                    g,
                    n: 4,
                },
            );
        }
    }
}

/// Chains point gradients through the kinematics: `∂P_k/∂q_j = perp(P_k − P_j)` for `k > j`.
pub(crate) fn point_grad_to_joints(
    d: usize,
    pts: &[Vec2; MAX_LINKS + 1],
    gp: &[Vec2; MAX_LINKS + 1],
    out: &mut [f64],
) {
    for j in 0..d {
        let mut acc = 0.0;
        for k in (j + 1)..=d {
            acc += (pts[k] - pts[j]).perp().dot(gp[k]);
        }
        out[j] += acc;
    }
}

fn clearance_unchecked(arm: &ArmModel, env: &Environment, q: &[f64]) -> f64 {
    let mut pts = [Vec2::ZERO; MAX_LINKS + 1];
    arm.joint_points(q, &mut pts);
    let mut best = f64::INFINITY;
    for_each_pair(arm, env, &pts, |sd, _| {
        if sd < best {
            best = sd;
        }
    });
    best
}

/// Minimum signed distance over all link–obstacle and non-adjacent link
/// pairs. `+∞` when there are no pairs at all.
pub fn signed_clearance(arm: &ArmModel, env: &Environment, q: &[f64]) -> Result<f64> {
    arm.check_dim(q)?;
    Ok(clearance_unchecked(arm, env, q))
}

pub fn in_collision(arm: &ArmModel, env: &Environment, q: &[f64]) -> Result<bool> {
    Ok(signed_clearance(arm, env, q)? < 0.0)
}

/// Minimum clearance over `n_sub + 1` configurations linearly interpolated
/// between `q_a` and `q_b` (both ends included).
pub fn swept_clearance(
    arm: &ArmModel,
    env: &Environment,
    q_a: &[f64],
    q_b: &[f64],
    n_sub: usize,
) -> Result<f64> {
    arm.check_dim(q_a)?;
    arm.check_dim(q_b)?;
    if n_sub == 0 {
        return Err(Error::invalid("swept_clearance", "n_sub must be at least 1"));
    }
    let mut q = [0.0; MAX_LINKS];
    let mut best = f64::INFINITY;
    for m in 0..=n_sub {
        interpolate(q_a, q_b, m as f64 / n_sub as f64, &mut q[..q_a.len()]);
        best = best.min(clearance_unchecked(arm, env, &q[..q_a.len()]));
    }
    Ok(best)
}

/// `out = (1 − s)·a + s·b`, exact at `s = 0` and `s = 1`.
#[inline]
pub(crate) fn interpolate(a: &[f64], b: &[f64], s: f64, out: &mut [f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = if s == 0.0 {
            *x
        } else if s == 1.0 {
            *y
        } else {
            x + (y - x) * s
        };
    }
}

/// Whether the straight C-space segment is free when checked at spacing
/// `resolution` (Euclidean, radians).
pub fn segment_free(
    arm: &ArmModel,
    env: &Environment,
    a: &[f64],
    b: &[f64],
    resolution: f64,
) -> bool {
    let n = (crate::math::ceil(crate::math::dist(a, b) / resolution) as usize).max(1);
    let mut q = [0.0; MAX_LINKS];
    let d = a.len();
    (0..=n).all(|m| {
        interpolate(a, b, m as f64 / n as f64, &mut q[..d]);
        clearance_unchecked(arm, env, &q[..d]) >= 0.0
    })
}

/// Conservative segment test. A point on link `i` moves at most
/// `Σ_{j≤i} |Δq_j| · (l_j + … + l_i)` along the segment, so each pair's
/// clearance certifies the stretch it covers at that rate (both rates for
/// link–link pairs). Gives up and reports a collision after
/// `16 × ⌈|b − a| / resolution⌉` checks.
pub fn segment_certified_free(
    arm: &ArmModel,
    env: &Environment,
    a: &[f64],
    b: &[f64],
    resolution: f64,
) -> bool {
    let d = a.len();
    let mut rates = [0.0; MAX_LINKS];
    for (i, rate) in rates.iter_mut().enumerate().take(d) {
        for j in 0..=i {
            let reach: f64 = arm.link_lengths[j..=i].iter().sum();
            *rate += reach * (b[j] - a[j]).abs();
        }
    }
    let budget = 16 * (crate::math::ceil(crate::math::dist(a, b) / resolution) as usize).max(1);
    let mut q = [0.0; MAX_LINKS];
    let mut pts = [Vec2::ZERO; MAX_LINKS + 1];
    let mut s = 0.0;
    for _ in 0..=budget {
        interpolate(a, b, s, &mut q[..d]);
        arm.joint_points(&q[..d], &mut pts);
        let mut hit = false;
        let mut ds = f64::INFINITY;
        for_each_pair(arm, env, &pts, |sd, pair| {
            if sd < 0.0 {
                hit = true;
            }
            let rate = if pair.n == 2 {
                rates[pair.idx[0]]
            } else {
                rates[pair.idx[0]] + rates[pair.idx[2]]
            };
            if rate > 0.0 {
                ds = ds.min(sd / rate);
            }
        });
        if hit {
            return false;
        }
        if s == 1.0 {
            return true;
        }
        if ds < 1e-12 {
            return false;
        }
        s = if s + ds >= 1.0 { 1.0 } else { s + ds };
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    fn arm2() -> ArmModel {
        ArmModel::new(vec![1.0, 1.0], 0.1, Vec2::ZERO, vec![(-3.0, 3.0); 2]).unwrap()
    }

    #[test]
    fn fk_zero_and_quarter_turn() {
        let arm = arm2();
        let p = forward_kinematics(&arm, &[0.0, 0.0]).unwrap();
        assert_eq!(p.tip, Vec2::new(2.0, 0.0));
        assert_eq!(p.links[0].b, Vec2::new(1.0, 0.0));
        let p = forward_kinematics(&arm, &[PI / 2.0, 0.0]).unwrap();
        assert!((p.tip - Vec2::new(0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn fk_dimension_mismatch() {
        assert!(matches!(
            forward_kinematics(&arm2(), &[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn circle_distances() {
        let c = Capsule {
            a: Vec2::new(0.0, 0.0),
            b: Vec2::new(1.0, 0.0),
            radius: 0.1,
        };
        let o = Obstacle::circle(Vec2::new(0.0, 2.0), 0.5);
        assert!((signed_distance(&c, &o) - 1.4).abs() < 1e-12);

        let through = Capsule {
            a: Vec2::new(-0.5, 0.0),
            b: Vec2::new(0.5, 0.0),
            radius: 0.1,
        };
        let big = Obstacle::circle(Vec2::ZERO, 1.0);
        assert!((signed_distance(&through, &big) + 1.1).abs() < 1e-12);

        let touching = Obstacle::circle(Vec2::new(0.5, 0.6), 0.5);
        assert!(signed_distance(&c, &touching).abs() < 1e-12);
    }

    #[test]
    fn box_distances() {
        let bx = Obstacle::aabb(Vec2::new(1.0, -1.0), Vec2::new(2.0, 1.0));
        let c = Capsule {
            a: Vec2::new(-1.0, 0.0),
            b: Vec2::new(0.5, 0.0),
            radius: 0.1,
        };
        assert!((signed_distance(&c, &bx) - 0.4).abs() < 1e-12);
        // Through the box along its middle: deepest point is 0.5 from the side faces
        // and 1.0 from top/bottom, so face distance is 0.5.
        let c = Capsule {
            a: Vec2::new(0.0, 0.0),
            b: Vec2::new(3.0, 0.0),
            radius: 0.1,
        };
        assert!((signed_distance(&c, &bx) + 0.6).abs() < 1e-12);
        // Diagonal approach to a corner.
        let c = Capsule {
            a: Vec2::new(3.0, 3.0),
            b: Vec2::new(3.0, 2.0),
            radius: 0.0001,
        };
        let expect = (1.0f64 + 1.0).sqrt() - 0.0001;
        assert!((signed_distance(&c, &bx) - expect).abs() < 1e-12);
        // Segment passing a corner diagonally.
        let c = Capsule {
            a: Vec2::new(2.0, 2.5),
            b: Vec2::new(3.5, 1.0),
            radius: 0.05,
        };
        let brute = (0..=100_000)
            .map(|i| {
                let s = i as f64 / 100_000.0;
                bx.point_sdf(c.a.lerp(c.b, s)).0
            })
            .fold(f64::INFINITY, f64::min)
            - 0.05;
        assert!((signed_distance(&c, &bx) - brute).abs() < 1e-9);
    }

    #[test]
    fn segment_segment_cases() {
        let (d, _) = segment_segment_dist(
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(1.0, 1.0),
        );
        assert!((d - 1.0).abs() < 1e-12);
        let (d, _) = segment_segment_dist(
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(1.0, 0.0),
        );
        assert!(d.abs() < 1e-12);
        let (d, _) = segment_segment_dist(
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(3.0, 0.0),
            Vec2::new(4.0, 0.0),
        );
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn straight_three_link_arm_is_self_clear() {
        let arm = ArmModel::planar_3link();
        let env = Environment::empty(Aabb::new(Vec2::new(-2.0, -2.0), Vec2::new(2.0, 2.0)));
        let c = signed_clearance(&arm, &env, &[0.0, 0.0, 0.0]).unwrap();
        // links 0 and 2 are collinear, 0.4 m apart end to end
        assert!((c - (0.4 - 0.08)).abs() < 1e-12);
    }

    #[test]
    fn clearance_single_far_obstacle_and_penetration() {
        let arm = arm2();
        let mut env = Environment::empty(Aabb::new(Vec2::new(-5.0, -5.0), Vec2::new(5.0, 5.0)));
        env.objects.push(Obstacle::circle(Vec2::new(0.0, 4.0), 0.5));
        let c = signed_clearance(&arm, &env, &[0.0, 0.0]).unwrap();
        assert!((c - (4.0 - 0.5 - 0.1)).abs() < 1e-12);
        env.objects[0] = Obstacle::circle(Vec2::new(0.5, 0.05), 0.2);
        let c = signed_clearance(&arm, &env, &[0.0, 0.0]).unwrap();
        assert!(c < 0.0);
        assert!(in_collision(&arm, &env, &[0.0, 0.0]).unwrap());
    }

    #[test]
    fn swept_detects_midpoint_penetration() {
        let arm = arm2();
        let mut env = Environment::empty(Aabb::new(Vec2::new(-5.0, -5.0), Vec2::new(5.0, 5.0)));
        // obstacle at 45°, endpoints at 0 and 90° are clear
        env.objects
            .push(Obstacle::circle(Vec2::new(1.5 * 0.70710678, 1.5 * 0.70710678), 0.2));
        let qa = [0.0, 0.0];
        let qb = [PI / 2.0, 0.0];
        assert!(signed_clearance(&arm, &env, &qa).unwrap() > 0.0);
        assert!(signed_clearance(&arm, &env, &qb).unwrap() > 0.0);
        assert!(swept_clearance(&arm, &env, &qa, &qb, 2).unwrap() < 0.0);
        assert_eq!(
            swept_clearance(&arm, &env, &qa, &qa, 4).unwrap(),
            signed_clearance(&arm, &env, &qa).unwrap()
        );
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Obstacle::circle(Vec2::ZERO, 0.0).validate().is_err());
        assert!(Obstacle::aabb(Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0))
            .validate()
            .is_err());
        assert!(ArmModel::new(vec![1.0], -0.1, Vec2::ZERO, vec![(-1.0, 1.0)]).is_err());
        assert!(ArmModel::new(vec![1.0], 0.1, Vec2::ZERO, vec![(1.0, -1.0)]).is_err());
    }

    #[test]
    fn segment_box_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut r = crate::seed::Rng::seed_from_u64(1);
        let (min, max) = (Vec2::new(0.6, 0.3), Vec2::new(0.8, 0.5));
        let f = |a: Vec2, b: Vec2| segment_box_sd(a, b, min, max).0;
        let h = 1e-7;
        for _ in 0..500 {
            let a = Vec2::new(r.random_range(0.3..1.1), r.random_range(0.0..0.8));
            let b = Vec2::new(r.random_range(0.3..1.1), r.random_range(0.0..0.8));
            let (v, ga, gb) = segment_box_sd(a, b, min, max);
            let (ex, ey) = (Vec2::new(h, 0.0), Vec2::new(0.0, h));
            let fd = [
                (f(a + ex, b) - f(a - ex, b)) / (2.0 * h),
                (f(a + ey, b) - f(a - ey, b)) / (2.0 * h),
                (f(a, b + ex) - f(a, b - ex)) / (2.0 * h),
                (f(a, b + ey) - f(a, b - ey)) / (2.0 * h),
            ];
            for (x, y) in fd.iter().zip([ga.x, ga.y, gb.x, gb.y]) {
                assert!((x - y).abs() < 1e-5, "a={a:?} b={b:?}");
            }
            let brute = (0..=4000)
                .map(|i| box_sdf(min, max, a + (b - a) * (i as f64 / 4000.0)).0)
                .fold(f64::INFINITY, f64::min);
            assert!(v <= brute + 1e-12);
        }
    }
    #[test]
    fn certified_segment_catches_what_sparse_sampling_skips() {
        let arm = ArmModel::planar_3link();
        let bounds = Aabb::new(Vec2::new(-2.0, -2.0), Vec2::new(2.0, 2.0));
        let mut env = Environment::empty(bounds);
        env.objects.push(Obstacle::circle(Vec2::new(libm::cos(0.1), libm::sin(0.1)), 0.01));
        let (a, b) = ([0.0, 0.0, 0.0], [0.4, 0.0, 0.0]);
        assert!(segment_free(&arm, &env, &a, &b, 0.2));
        assert!(!segment_free(&arm, &env, &a, &b, 1e-3));
        assert!(!segment_certified_free(&arm, &env, &a, &b, 0.2));

        env.objects = vec![
            Obstacle::circle(Vec2::new(0.6, 0.5), 0.15),
            Obstacle::circle(Vec2::new(-0.4, 0.7), 0.1),
            Obstacle::aabb(Vec2::new(0.2, -0.9), Vec2::new(0.5, -0.6)),
        ];
        let mut certified = 0;
        for k in 0..300 {
            let f = |i: usize| 2.5 * libm::sin(1.7 * (k * 7 + i) as f64 + 0.3 * i as f64);
            let qa = [f(0), f(1), f(2)];
            let qb: Vec<f64> = qa.iter().enumerate().map(|(i, v)| v + 0.3 * libm::sin((k * 13 + i) as f64)).collect();
            if segment_certified_free(&arm, &env, &qa, &qb, 0.02) {
                certified += 1;
                assert!(segment_free(&arm, &env, &qa, &qb, 1e-3), "segment {k}");
            }
        }
        assert!(certified > 50, "{certified}");
    }
}
