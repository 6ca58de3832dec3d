//! Planar convex geometry used by the release step: hulls, sensitivity hulls,
//! uniform sampling, isotropic position and the Minkowski gauge of a body.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in `f32`
//! on constrained targets and `f64` in simulation.

use std::cmp::Ordering;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("empty point set")]
    EmptyPointSet,
    #[error("non-finite coordinate in input")]
    NonFinite,
    #[error("degenerate body")]
    Degenerate,
    #[error("rank-deficient sample cloud")]
    RankDeficient,
    #[error("isotropic transform needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("body does not contain the origin in its interior")]
    OriginNotInterior,
    #[error("invalid interval: lo {lo} > hi {hi}")]
    InvalidInterval { lo: f64, hi: f64 },
}

/// Offset in the horizontal plane, meters east / north.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2<S> {
    pub e: S,
    pub n: S,
}

impl<S: Scalar> Point2<S> {
    pub fn new(e: S, n: S) -> Self {
        Self { e, n }
    }

    pub fn origin() -> Self {
        Self::new(S::zero(), S::zero())
    }

    pub fn dot(self, other: Self) -> S {
        self.e * other.e + self.n * other.n
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, other: Self) -> S {
        self.e * other.n - self.n * other.e
    }

    pub fn norm(self) -> S {
        self.e.hypot(self.n)
    }

    pub fn is_finite(self) -> bool {
        self.e.is_finite() && self.n.is_finite()
    }

    fn lex_cmp(&self, other: &Self) -> Ordering {
        self.e
            .partial_cmp(&other.e)
            .unwrap_or(Ordering::Equal)
            .then(self.n.partial_cmp(&other.n).unwrap_or(Ordering::Equal))
    }
}

impl<S: Scalar> Add for Point2<S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.e + rhs.e, self.n + rhs.n)
    }
}

impl<S: Scalar> Sub for Point2<S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.e - rhs.e, self.n - rhs.n)
    }
}

impl<S: Scalar> Mul<S> for Point2<S> {
    type Output = Self;
    fn mul(self, k: S) -> Self {
        Self::new(self.e * k, self.n * k)
    }
}

impl<S: Scalar> Neg for Point2<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.e, -self.n)
    }
}

/// Orientation of `c` relative to the directed line `a -> b`, with a
/// magnitude-relative dead band around zero.
fn turn<S: Scalar>(a: Point2<S>, b: Point2<S>, c: Point2<S>) -> S {
    let u = b - a;
    let v = c - a;
    let raw = u.cross(v);
    let tol = S::geometric_epsilon() * u.norm() * v.norm();
    if raw.abs() <= tol {
        S::zero()
    } else {
        raw
    }
}

/// Convex polygon with counter-clockwise vertices, starting from the
/// lexicographically smallest one. One or two vertices describe a point or a
/// segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexBody2<S> {
    vertices: Vec<Point2<S>>,
}

impl<S: Scalar> ConvexBody2<S> {
    pub fn vertices(&self) -> &[Point2<S>] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Shoelace area; zero for points and segments.
    pub fn area(&self) -> S {
        let m = self.vertices.len();
        if m < 3 {
            return S::zero();
        }
        let mut twice = S::zero();
        for i in 0..m {
            twice = twice + self.vertices[i].cross(self.vertices[(i + 1) % m]);
        }
        twice / S::lit(2.0)
    }

    pub fn is_degenerate(&self) -> bool {
        let (lo, hi) = self.bounding_box();
        let scale = (hi - lo).norm();
        self.area() <= S::geometric_epsilon() * scale * scale || scale == S::zero()
    }

    pub fn bounding_box(&self) -> (Point2<S>, Point2<S>) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices[1..] {
            lo.e = lo.e.min(v.e);
            lo.n = lo.n.min(v.n);
            hi.e = hi.e.max(v.e);
            hi.n = hi.n.max(v.n);
        }
        (lo, hi)
    }

    /// Largest pairwise vertex distance.
    pub fn diameter(&self) -> S {
        let mut best = S::zero();
        for (i, a) in self.vertices.iter().enumerate() {
            for b in &self.vertices[i + 1..] {
                best = best.max((*a - *b).norm());
            }
        }
        best
    }

    /// Point-in-polygon, boundary inclusive.
    pub fn contains(&self, p: Point2<S>) -> bool {
        let m = self.vertices.len();
        match m {
            1 => (p - self.vertices[0]).norm() <= S::geometric_epsilon(),
            2 => {
                let (a, b) = (self.vertices[0], self.vertices[1]);
                turn(a, b, p) == S::zero() && (p - a).dot(p - b) <= S::zero()
            }
            _ => (0..m).all(|i| turn(self.vertices[i], self.vertices[(i + 1) % m], p) >= S::zero()),
        }
    }

    /// Expands the body so that its bounding box is at least `2 * min_half_width`
    /// on each axis, by Minkowski-adding a small axis-aligned box.
    pub fn inflate_to_min_half_width(&self, min_half_width: S) -> Self {
        let (lo, hi) = self.bounding_box();
        let half = Point2::new((hi.e - lo.e) / S::lit(2.0), (hi.n - lo.n) / S::lit(2.0));
        let pad_e = (min_half_width - half.e).max(S::zero());
        let pad_n = (min_half_width - half.n).max(S::zero());
        if pad_e == S::zero() && pad_n == S::zero() && !self.is_degenerate() {
            return self.clone();
        }
        // A degenerate diagonal segment can have wide extents but zero area.
        let pad_e = pad_e.max(min_half_width * S::lit(1e-3));
        let pad_n = pad_n.max(min_half_width * S::lit(1e-3));
        let mut pts = Vec::with_capacity(self.vertices.len() * 4);
        for v in &self.vertices {
            for (se, sn) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                pts.push(*v + Point2::new(pad_e * S::lit(se), pad_n * S::lit(sn)));
            }
        }
        convex_hull(&pts).expect("inflated point set is non-empty and finite")
    }

    /// Image of the body under a linear map with positive determinant.
    pub fn transformed(&self, m: &Mat2<S>) -> Self {
        let pts: Vec<_> = self.vertices.iter().map(|v| m.apply(*v)).collect();
        convex_hull(&pts).expect("image of a non-empty body is non-empty")
    }
}

/// Andrew's monotone chain. Drops duplicates and collinear boundary points.
pub fn convex_hull<S: Scalar>(points: &[Point2<S>]) -> Result<ConvexBody2<S>, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyPointSet);
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.lex_cmp(b));
    pts.dedup();
    if pts.len() < 3 {
        return Ok(ConvexBody2 { vertices: pts });
    }

    let mut hull: Vec<Point2<S>> = Vec::with_capacity(pts.len() + 1);
    for &p in &pts {
        while hull.len() >= 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= S::zero() {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len
            && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= S::zero()
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    Ok(ConvexBody2 { vertices: hull })
}

/// All `v_i - v_j` for ordered pairs `i != j`, plus the origin.
pub fn pairwise_differences<S: Scalar>(body: &ConvexBody2<S>) -> Vec<Point2<S>> {
    let vs = body.vertices();
    let mut out = Vec::with_capacity(vs.len() * vs.len().saturating_sub(1) + 1);
    for (i, a) in vs.iter().enumerate() {
        for (j, b) in vs.iter().enumerate() {
            if i != j {
                out.push(*a - *b);
            }
        }
    }
    out.push(Point2::origin());
    out
}

/// Origin-symmetric hull of the pairwise vertex differences.
pub fn sensitivity_hull<S: Scalar>(body: &ConvexBody2<S>) -> Result<ConvexBody2<S>, GeometryError> {
    convex_hull(&pairwise_differences(body))
}

/// Rejection-free uniform sampler over a convex polygon: fan triangulation
/// from the first vertex, area-weighted triangle choice, then a uniform
/// barycentric draw inside the triangle.
#[derive(Debug, Clone)]
pub struct PolygonSampler<S> {
    apex: Point2<S>,
    edges: Vec<(Point2<S>, Point2<S>)>,
    cumulative: Vec<S>,
}

impl<S: Scalar> PolygonSampler<S> {
    pub fn new(body: &ConvexBody2<S>) -> Result<Self, GeometryError> {
        if body.len() < 3 || body.is_degenerate() {
            return Err(GeometryError::Degenerate);
        }
        let vs = body.vertices();
        let apex = vs[0];
        let mut edges = Vec::with_capacity(vs.len() - 2);
        let mut cumulative = Vec::with_capacity(vs.len() - 2);
        let mut acc = S::zero();
        for w in vs[1..].windows(2) {
            let (b, c) = (w[0] - apex, w[1] - apex);
            acc = acc + b.cross(c).abs();
            edges.push((b, c));
            cumulative.push(acc);
        }
        Ok(Self { apex, edges, cumulative })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point2<S> {
        let total = *self.cumulative.last().expect("at least one triangle");
        let pick = S::lit(rng.gen::<f64>()) * total;
        let idx = self
            .cumulative
            .iter()
            .position(|&c| pick < c)
            .unwrap_or(self.cumulative.len() - 1);
        let (b, c) = self.edges[idx];
        let mut u = S::lit(rng.gen::<f64>());
        let mut v = S::lit(rng.gen::<f64>());
        if u + v > S::one() {
            u = S::one() - u;
            v = S::one() - v;
        }
        self.apex + b * u + c * v
    }
}

pub fn sample_uniform<S: Scalar, R: Rng + ?Sized>(
    body: &ConvexBody2<S>,
    rng: &mut R,
) -> Result<Point2<S>, GeometryError> {
    Ok(PolygonSampler::new(body)?.sample(rng))
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2<S> {
    pub m: [[S; 2]; 2],
}

impl<S: Scalar> Mat2<S> {
    pub fn new(a: S, b: S, c: S, d: S) -> Self {
        Self { m: [[a, b], [c, d]] }
    }

    pub fn identity() -> Self {
        Self::new(S::one(), S::zero(), S::zero(), S::one())
    }

    pub fn diag(a: S, d: S) -> Self {
        Self::new(a, S::zero(), S::zero(), d)
    }

    pub fn det(&self) -> S {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn apply(&self, p: Point2<S>) -> Point2<S> {
        Point2::new(
            self.m[0][0] * p.e + self.m[0][1] * p.n,
            self.m[1][0] * p.e + self.m[1][1] * p.n,
        )
    }

    pub fn mul(&self, o: &Self) -> Self {
        let a = &self.m;
        let b = &o.m;
        Self::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }

    pub fn scale(&self, k: S) -> Self {
        Self::new(self.m[0][0] * k, self.m[0][1] * k, self.m[1][0] * k, self.m[1][1] * k)
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d == S::zero() || !d.is_finite() {
            return None;
        }
        Some(Self::new(self.m[1][1] / d, -self.m[0][1] / d, -self.m[1][0] / d, self.m[0][0] / d))
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn symmetric_eigenvalues(&self) -> (S, S) {
        let (a, b, c) = (self.m[0][0], self.m[0][1], self.m[1][1]);
        let half = S::lit(0.5);
        let mid = (a + c) * half;
        let rad = ((a - c) * half).hypot(b);
        (mid - rad, mid + rad)
    }
}

/// Linear map putting a body into isotropic position, with its inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsotropicTransform2<S> {
    pub t: Mat2<S>,
    pub t_inv: Mat2<S>,
}

impl<S: Scalar> IsotropicTransform2<S> {
    pub fn identity() -> Self {
        Self { t: Mat2::identity(), t_inv: Mat2::identity() }
    }

    pub fn forward(&self, p: Point2<S>) -> Point2<S> {
        self.t.apply(p)
    }

    pub fn backward(&self, p: Point2<S>) -> Point2<S> {
        self.t_inv.apply(p)
    }
}

pub const MIN_ISOTROPIC_SAMPLES: usize = 100;

/// Uncentered second-moment matrix of a point cloud.
pub fn second_moments<S: Scalar>(pts: &[Point2<S>]) -> Mat2<S> {
    let n = S::from_usize(pts.len()).expect("sample count fits scalar");
    let (mut xx, mut xy, mut yy) = (S::zero(), S::zero(), S::zero());
    for p in pts {
        xx = xx + p.e * p.e;
        xy = xy + p.e * p.n;
        yy = yy + p.n * p.n;
    }
    Mat2::new(xx / n, xy / n, xy / n, yy / n)
}

/// Estimates `T = Σ^{-1/2}` from uniform interior samples of `body`, where
/// `Σ` is the second-moment matrix about the origin, rescaled to `det T = 1`.
pub fn isotropic_transform<S: Scalar, R: Rng + ?Sized>(
    body: &ConvexBody2<S>,
    n_samples: usize,
    rng: &mut R,
) -> Result<IsotropicTransform2<S>, GeometryError> {
    if n_samples < MIN_ISOTROPIC_SAMPLES {
        return Err(GeometryError::TooFewSamples { min: MIN_ISOTROPIC_SAMPLES, got: n_samples });
    }
    let sampler = PolygonSampler::new(body)?;
    let samples: Vec<_> = (0..n_samples).map(|_| sampler.sample(rng)).collect();
    isotropic_from_moments(&second_moments(&samples))
}

pub(crate) fn isotropic_from_moments<S: Scalar>(
    sigma: &Mat2<S>,
) -> Result<IsotropicTransform2<S>, GeometryError> {
    let (lo, hi) = sigma.symmetric_eigenvalues();
    if !(lo > hi * S::geometric_epsilon()) || !hi.is_finite() {
        return Err(GeometryError::RankDeficient);
    }
    // Closed-form square root of a 2x2 SPD matrix:
    // sqrt(M) = (M + s I) / t with s = sqrt(det M), t = sqrt(tr M + 2 s).
    let (a, b, c) = (sigma.m[0][0], sigma.m[0][1], sigma.m[1][1]);
    let s = sigma.det().sqrt();
    let t = (a + c + S::lit(2.0) * s).sqrt();
    let root = Mat2::new((a + s) / t, b / t, b / t, (c + s) / t);
    let inv_root = root.inverse().ok_or(GeometryError::RankDeficient)?;
    let norm = inv_root.det().sqrt();
    let t_mat = inv_root.scale(S::one() / norm);
    let t_inv = root.scale(norm);
    Ok(IsotropicTransform2 { t: t_mat, t_inv })
}

/// Precomputed edge constraints `n_i · p <= h_i` of a body containing the
/// origin in its interior; evaluates the Minkowski functional quickly.
#[derive(Debug, Clone)]
pub struct MinkowskiGauge<S> {
    facets: Vec<Point2<S>>,
}

impl<S: Scalar> MinkowskiGauge<S> {
    pub fn new(body: &ConvexBody2<S>) -> Result<Self, GeometryError> {
        if body.len() < 3 || body.is_degenerate() {
            return Err(GeometryError::Degenerate);
        }
        let vs = body.vertices();
        let m = vs.len();
        let mut facets = Vec::with_capacity(m);
        for i in 0..m {
            let edge = vs[(i + 1) % m] - vs[i];
            let normal = Point2::new(edge.n, -edge.e);
            let offset = normal.dot(vs[i]);
            if !(offset > S::geometric_epsilon() * normal.norm() * vs[i].norm()) {
                return Err(GeometryError::OriginNotInterior);
            }
            facets.push(normal * (S::one() / offset));
        }
        Ok(Self { facets })
    }

    pub fn norm(&self, p: Point2<S>) -> S {
        self.facets
            .iter()
            .map(|n| n.dot(p))
            .fold(S::zero(), |acc, v| acc.max(v))
    }
}

/// `inf { λ > 0 : p / λ ∈ K }`.
pub fn minkowski_norm<S: Scalar>(body: &ConvexBody2<S>, p: Point2<S>) -> Result<S, GeometryError> {
    Ok(MinkowskiGauge::new(body)?.norm(p))
}

/// Closed interval on the altitude axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval1<S> {
    lo: S,
    hi: S,
}

impl<S: Scalar> Interval1<S> {
    pub fn new(lo: S, hi: S) -> Result<Self, GeometryError> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if lo > hi {
            return Err(GeometryError::InvalidInterval {
                lo: lo.to_f64().unwrap_or(f64::NAN),
                hi: hi.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> S {
        self.lo
    }

    pub fn hi(&self) -> S {
        self.hi
    }

    pub fn width(&self) -> S {
        self.hi - self.lo
    }

    pub fn contains(&self, v: S) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn inflate_to_min_half_width(&self, min_half_width: S) -> Self {
        let half = self.width() / S::lit(2.0);
        if half >= min_half_width {
            return *self;
        }
        let mid = (self.lo + self.hi) / S::lit(2.0);
        Self { lo: mid - min_half_width, hi: mid + min_half_width }
    }
}
