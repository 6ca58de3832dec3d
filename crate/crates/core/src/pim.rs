//! Stateful per-drone obfuscation engine.
//!
//! Each release works on a moving box of `b³` grid cells centered on the
//! drone's current cell. The prior over the box is carried forward from the
//! previous posterior, a δ-location set is extracted from it, and noise is
//! drawn from the K-norm mechanism of that set's sensitivity hull (planar)
//! plus an independent 1-D K-norm draw on the altitude axis. The release is
//! then folded back into the posterior.
//!
//! Planar hulls, intervals and cell centers inside [`DeltaLocationSet`] are
//! expressed relative to the center of the anchor cell, so identical cell
//! selections give bit-identical hulls from step to step.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Enu, GeoPoint, LocalFrame};
use crate::geometry::{
    convex_hull, isotropic_transform, sensitivity_hull, ConvexBody2, GeometryError, Interval1,
    IsotropicTransform2, MinkowskiGauge, Point2, PolygonSampler,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite position")]
    NonFinitePosition,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T, E = MechanismError> = std::result::Result<T, E>;

/// Tolerance on probability vectors summing to one.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

/// Default number of uniform samples used to estimate the isotropic transform.
pub const DEFAULT_ISOTROPIC_SAMPLES: usize = 1000;

/// Gamma shape of the planar radius (dimension + 1).
pub const PLANAR_GAMMA_SHAPE: f64 = 3.0;

/// Gamma shape of the vertical radius (dimension + 1).
pub const VERTICAL_GAMMA_SHAPE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub cell_size_e: f64,
    pub cell_size_n: f64,
    pub cell_size_alt: f64,
    /// Cells per axis of the moving box; odd.
    pub b: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { cell_size_e: 50.0, cell_size_n: 50.0, cell_size_alt: 10.0, b: 3 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cell_size_e", self.cell_size_e),
            ("cell_size_n", self.cell_size_n),
            ("cell_size_alt", self.cell_size_alt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MechanismError::InvalidGrid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.b < 3 || self.b % 2 == 0 {
            return Err(MechanismError::InvalidGrid(format!("b must be odd and >= 3, got {}", self.b)));
        }
        Ok(())
    }

    /// Half-width of the box in cells.
    pub fn k(&self) -> i64 {
        (self.b as i64 - 1) / 2
    }

    pub fn box_len(&self) -> usize {
        self.b * self.b * self.b
    }

    pub fn cell_of(&self, p: &Enu) -> CellIndex {
        CellIndex {
            e: (p.e / self.cell_size_e).floor() as i64,
            n: (p.n / self.cell_size_n).floor() as i64,
            alt: (p.u / self.cell_size_alt).floor() as i64,
        }
    }

    pub fn cell_center(&self, c: CellIndex) -> Enu {
        Enu::new(
            (c.e as f64 + 0.5) * self.cell_size_e,
            (c.n as f64 + 0.5) * self.cell_size_n,
            (c.alt as f64 + 0.5) * self.cell_size_alt,
        )
    }

    /// Center of an offset cell relative to the anchor cell center.
    pub fn offset_center(&self, o: CellOffset) -> Enu {
        Enu::new(
            o.de as f64 * self.cell_size_e,
            o.dn as f64 * self.cell_size_n,
            o.dalt as f64 * self.cell_size_alt,
        )
    }
}

/// Absolute cell on the globally anchored grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub e: i64,
    pub n: i64,
    pub alt: i64,
}

impl CellIndex {
    pub fn shifted(self, o: CellOffset) -> Self {
        Self { e: self.e + o.de, n: self.n + o.dn, alt: self.alt + o.dalt }
    }

    pub fn minus(self, other: CellIndex) -> CellOffset {
        CellOffset { de: self.e - other.e, dn: self.n - other.n, dalt: self.alt - other.alt }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellOffset {
    pub de: i64,
    pub dn: i64,
    pub dalt: i64,
}

impl CellOffset {
    pub const ZERO: CellOffset = CellOffset { de: 0, dn: 0, dalt: 0 };

    pub fn new(de: i64, dn: i64, dalt: i64) -> Self {
        Self { de, dn, dalt }
    }
}

/// Offsets `{-k..k}³` in row-major order over `(de, dn, dalt)`.
pub fn build_offsets(grid: &GridSpec) -> Result<Vec<CellOffset>> {
    grid.validate()?;
    let k = grid.k();
    let mut out = Vec::with_capacity(grid.box_len());
    for de in -k..=k {
        for dn in -k..=k {
            for dalt in -k..=k {
                out.push(CellOffset::new(de, dn, dalt));
            }
        }
    }
    Ok(out)
}

/// Position of `o` in the [`build_offsets`] order, if inside the box.
pub fn offset_index(grid: &GridSpec, o: CellOffset) -> Option<usize> {
    let k = grid.k();
    let b = grid.b as i64;
    let inside = |v: i64| (-k..=k).contains(&v);
    if !(inside(o.de) && inside(o.dn) && inside(o.dalt)) {
        return None;
    }
    Some((((o.de + k) * b + (o.dn + k)) * b + (o.dalt + k)) as usize)
}

/// The moving box: an anchor cell and the offset template around it.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOffsetSet {
    pub anchor: CellIndex,
    pub offsets: Arc<Vec<CellOffset>>,
}

impl CellOffsetSet {
    pub fn new(grid: &GridSpec, anchor: CellIndex) -> Result<Self> {
        Ok(Self { anchor, offsets: Arc::new(build_offsets(grid)?) })
    }

    pub fn with_template(anchor: CellIndex, offsets: Arc<Vec<CellOffset>>) -> Self {
        Self { anchor, offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn cell(&self, i: usize) -> CellIndex {
        self.anchor.shifted(self.offsets[i])
    }

    pub fn zero_index(&self) -> usize {
        self.offsets
            .iter()
            .position(|o| *o == CellOffset::ZERO)
            .expect("offset template contains the origin")
    }
}

/// Distribution over the cells of a box, aligned with its offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(MechanismError::InvalidParameter(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(MechanismError::InvalidParameter(format!("probabilities sum to {sum}")));
        }
        Ok(Self(p))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Scales non-negative weights to sum to one.
    pub fn normalized(mut w: Vec<f64>) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(MechanismError::InvalidParameter("weights have no mass".into()));
        }
        w.iter_mut().for_each(|v| *v /= sum);
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Row-stochastic matrix over box offsets: `m[i][j]` is the probability of
/// moving from offset `i` to offset `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    m: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(n: usize, m: Vec<f64>) -> Result<Self> {
        if m.len() != n * n {
            return Err(MechanismError::DimensionMismatch { expected: n * n, got: m.len() });
        }
        if m.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(MechanismError::InvalidParameter("transition entries must be >= 0".into()));
        }
        for (i, row) in m.chunks(n).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > PROBABILITY_TOLERANCE {
                return Err(MechanismError::InvalidParameter(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { n, m })
    }

    /// Every row `1/b³`.
    pub fn uniform(n: usize) -> Self {
        Self { n, m: vec![1.0 / n as f64; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        Self { n, m }
    }

    /// Translation-invariant movement model learned from a training track:
    /// counts per-step cell displacements and sets `m[i][j]` proportional to
    /// `count(o_j - o_i) + 1`.
    pub fn from_track(grid: &GridSpec, track: &[Enu]) -> Result<Self> {
        let offsets = build_offsets(grid)?;
        let span = 2 * grid.k();
        let side = (2 * span + 1) as usize;
        let idx = |d: CellOffset| -> Option<usize> {
            let r = -span..=span;
            (r.contains(&d.de) && r.contains(&d.dn) && r.contains(&d.dalt)).then(|| {
                (((d.de + span) as usize * side) + (d.dn + span) as usize) * side
                    + (d.dalt + span) as usize
            })
        };
        let mut counts = vec![0u64; side * side * side];
        for w in track.windows(2) {
            let d = grid.cell_of(&w[1]).minus(grid.cell_of(&w[0]));
            if let Some(i) = idx(d) {
                counts[i] += 1;
            }
        }
        let n = offsets.len();
        let mut m = vec![0.0; n * n];
        for (i, oi) in offsets.iter().enumerate() {
            let row = &mut m[i * n..(i + 1) * n];
            for (j, oj) in offsets.iter().enumerate() {
                let d = CellOffset::new(oj.de - oi.de, oj.dn - oi.dn, oj.dalt - oi.dalt);
                row[j] = counts[idx(d).expect("box differences fit the count table")] as f64 + 1.0;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(Self { n, m })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.m[i * self.n..(i + 1) * self.n]
    }

    /// Row vector times matrix, `p · M`.
    pub fn propagate(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, pi) in p.iter().enumerate() {
            if *pi == 0.0 {
                continue;
            }
            for (o, mij) in out.iter_mut().zip(self.row(i)) {
                *o += pi * mij;
            }
        }
        out
    }
}

/// Cells chosen to cover at least `1 - δ` of the prior, with their hulls.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaLocationSet {
    /// Indices into the box offsets, in selection order.
    pub cells: Vec<usize>,
    pub mass: f64,
    pub planar_hull: ConvexBody2<f64>,
    pub vertical_interval: Interval1<f64>,
}

impl DeltaLocationSet {
    pub fn contains_cell(&self, i: usize) -> bool {
        self.cells.contains(&i)
    }
}

/// Greedy prefix: cells by descending probability (ties by index) until the
/// cumulative mass reaches `1 - δ`. With `δ = 0` every cell with positive
/// mass is taken.
pub fn select_mass_prefix(p: &[f64], delta: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    if delta <= 0.0 {
        return order.into_iter().filter(|&i| p[i] > 0.0).collect();
    }
    let target = 1.0 - delta - 1e-12;
    let mut acc = 0.0;
    let mut out = Vec::new();
    for i in order {
        out.push(i);
        acc += p[i];
        if acc >= target {
            break;
        }
    }
    out
}

pub fn delta_location_set(
    prior: &ProbabilityVector,
    offsets: &CellOffsetSet,
    delta: f64,
    grid: &GridSpec,
) -> Result<DeltaLocationSet> {
    if prior.len() != offsets.len() {
        return Err(MechanismError::DimensionMismatch { expected: offsets.len(), got: prior.len() });
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(MechanismError::InvalidParameter(format!("delta must be in [0, 1), got {delta}")));
    }
    let cells = select_mass_prefix(prior.as_slice(), delta);
    let mass = cells.iter().map(|&i| prior.as_slice()[i]).sum();
    let (he, hn, ha) = (grid.cell_size_e / 2.0, grid.cell_size_n / 2.0, grid.cell_size_alt / 2.0);
    let mut corners = Vec::with_capacity(cells.len() * 4);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in &cells {
        let c = grid.offset_center(offsets.offsets[i]);
        for (se, sn) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
            corners.push(Point2::new(c.e + se * he, c.n + sn * hn));
        }
        lo = lo.min(c.u - ha);
        hi = hi.max(c.u + ha);
    }
    Ok(DeltaLocationSet {
        cells,
        mass,
        planar_hull: convex_hull(&corners)?,
        vertical_interval: Interval1::new(lo, hi)?,
    })
}

fn gamma_radius<R: Rng + ?Sized>(shape: f64, epsilon: f64, rng: &mut R) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(MechanismError::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let g = Gamma::new(shape, 1.0 / epsilon)
        .map_err(|e| MechanismError::InvalidParameter(format!("gamma: {e}")))?;
    Ok(g.sample(rng))
}

/// Planar K-norm sampler for a fixed δ-location hull: the sensitivity hull
/// `K`, its gauge, the isotropic transform `T`, and a uniform sampler on `T·K`.
#[derive(Debug, Clone)]
pub struct PlanarRelease {
    pub hull: ConvexBody2<f64>,
    pub sensitivity: ConvexBody2<f64>,
    pub gauge: MinkowskiGauge<f64>,
    pub transform: IsotropicTransform2<f64>,
    isotropic_sampler: PolygonSampler<f64>,
}

impl PlanarRelease {
    pub fn new<R: Rng + ?Sized>(hull: &ConvexBody2<f64>, isotropic_samples: usize, rng: &mut R) -> Result<Self> {
        let sensitivity = sensitivity_hull(hull)?;
        let gauge = MinkowskiGauge::new(&sensitivity)?;
        let transform = isotropic_transform(&sensitivity, isotropic_samples, rng)?;
        let isotropic_sampler = PolygonSampler::new(&sensitivity.transformed(&transform.t))?;
        Ok(Self { hull: hull.clone(), sensitivity, gauge, transform, isotropic_sampler })
    }

    /// `r · T⁻¹ · z'` with `z'` uniform in `T·K` and `r ~ Γ(3, 1/ε)`.
    pub fn sample<R: Rng + ?Sized>(&self, epsilon: f64, rng: &mut R) -> Result<Point2<f64>> {
        let r = gamma_radius(PLANAR_GAMMA_SHAPE, epsilon, rng)?;
        let z = self.isotropic_sampler.sample(rng);
        Ok(self.transform.backward(z * r))
    }
}

pub fn release_planar<R: Rng + ?Sized>(
    hull: &ConvexBody2<f64>,
    epsilon_h: f64,
    rng: &mut R,
) -> Result<Point2<f64>> {
    PlanarRelease::new(hull, DEFAULT_ISOTROPIC_SAMPLES, rng)?.sample(epsilon_h, rng)
}

/// 1-D K-norm draw with `K = [-w, w]`, `w` the interval width.
pub fn release_vertical<R: Rng + ?Sized>(
    interval: &Interval1<f64>,
    epsilon_v: f64,
    rng: &mut R,
) -> Result<f64> {
    let w = interval.width();
    if !(w > 0.0) {
        return Err(GeometryError::Degenerate.into());
    }
    let r = gamma_radius(VERTICAL_GAMMA_SHAPE, epsilon_v, rng)?;
    let z = rng.gen_range(-w..w);
    Ok(r * z)
}

/// Result of a posterior update; `fallback` is set when every likelihood
/// underflowed and the prior was returned unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorUpdate {
    pub posterior: ProbabilityVector,
    pub fallback: bool,
}

/// Bayes update with the K-norm likelihood
/// `exp(-ε_h ‖z_h - c_h(s)‖_K) · exp(-ε_v |z_v - c_v(s)| / w)`.
/// `released` is in the same frame as the box cell centers
/// ([`GridSpec::cell_center`] for absolute positions).
#[allow(clippy::too_many_arguments)]
pub fn posterior_update(
    prior: &ProbabilityVector,
    offsets: &CellOffsetSet,
    released: Enu,
    gauge: &MinkowskiGauge<f64>,
    vertical_w: f64,
    epsilon_h: f64,
    epsilon_v: f64,
    grid: &GridSpec,
) -> Result<PosteriorUpdate> {
    if prior.len() != offsets.len() {
        return Err(MechanismError::DimensionMismatch { expected: offsets.len(), got: prior.len() });
    }
    let log_lik: Vec<f64> = (0..offsets.len())
        .map(|i| {
            let c = grid.cell_center(offsets.cell(i));
            let dh = Point2::new(released.e - c.e, released.n - c.n);
            -epsilon_h * gauge.norm(dh) - epsilon_v * (released.u - c.u).abs() / vertical_w
        })
        .collect();
    Ok(bayes_from_log_likelihood(prior, &log_lik))
}

fn bayes_from_log_likelihood(prior: &ProbabilityVector, log_lik: &[f64]) -> PosteriorUpdate {
    let p = prior.as_slice();
    let shift = p
        .iter()
        .zip(log_lik)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = p
        .iter()
        .zip(log_lik)
        .map(|(pi, l)| if *pi > 0.0 { pi * (l - shift).exp() } else { 0.0 })
        .collect();
    match ProbabilityVector::normalized(weights) {
        Ok(posterior) if shift.is_finite() => PosteriorUpdate { posterior, fallback: false },
        _ => PosteriorUpdate { posterior: prior.clone(), fallback: true },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanismConfig {
    /// Budget spent on the horizontal release.
    pub epsilon_h: f64,
    /// Budget spent on the vertical release.
    pub epsilon_v: f64,
    pub delta: f64,
    pub grid: GridSpec,
    pub isotropic_samples: usize,
    pub min_half_width_h: f64,
    pub min_half_width_v: f64,
}

impl MechanismConfig {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self { epsilon_h: epsilon, epsilon_v: epsilon, delta, ..Self::default() }
    }

    pub fn total_epsilon(&self) -> f64 {
        self.epsilon_h + self.epsilon_v
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for (name, v) in [("epsilon_h", self.epsilon_h), ("epsilon_v", self.epsilon_v)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MechanismError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(MechanismError::InvalidParameter(format!(
                "delta must be in [0, 1), got {}",
                self.delta
            )));
        }
        if self.isotropic_samples < crate::geometry::MIN_ISOTROPIC_SAMPLES {
            return Err(MechanismError::InvalidParameter(format!(
                "isotropic_samples must be >= {}",
                crate::geometry::MIN_ISOTROPIC_SAMPLES
            )));
        }
        if !(self.min_half_width_h > 0.0 && self.min_half_width_v > 0.0) {
            return Err(MechanismError::InvalidParameter("minimum half-widths must be positive".into()));
        }
        Ok(())
    }
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            epsilon_h: 0.1,
            epsilon_v: 0.1,
            delta: 0.01,
            grid: GridSpec::default(),
            isotropic_samples: DEFAULT_ISOTROPIC_SAMPLES,
            min_half_width_h: 1.0,
            min_half_width_v: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObfuscationResult {
    pub released: GeoPoint,
    pub released_enu: Enu,
    /// Noise `z#` in meters, added to the true or surrogate position.
    pub offset: Enu,
    /// Position the noise was added to (true position unless a surrogate was used).
    pub base: Enu,
    pub surrogate_used: bool,
    pub likelihood_fallback: bool,
    pub delta_set: DeltaLocationSet,
}

/// Per-drone mechanism state. `step` is pure: it returns the successor state
/// and never mutates `self`.
#[derive(Debug, Clone)]
pub struct MechanismState {
    config: MechanismConfig,
    frame: LocalFrame,
    transition: Arc<TransitionMatrix>,
    posterior: ProbabilityVector,
    prev_offsets: CellOffsetSet,
    planar_cache: Option<Arc<PlanarRelease>>,
}

impl MechanismState {
    /// Fresh state with a uniform posterior around the cell of `start`.
    pub fn new(
        config: MechanismConfig,
        transition: TransitionMatrix,
        frame: LocalFrame,
        start: &GeoPoint,
    ) -> Result<Self> {
        config.validate()?;
        if transition.dim() != config.grid.box_len() {
            return Err(MechanismError::DimensionMismatch {
                expected: config.grid.box_len(),
                got: transition.dim(),
            });
        }
        if !start.is_finite() {
            return Err(MechanismError::NonFinitePosition);
        }
        let anchor = config.grid.cell_of(&frame.to_enu(start));
        Ok(Self {
            prev_offsets: CellOffsetSet::new(&config.grid, anchor)?,
            posterior: ProbabilityVector::uniform(config.grid.box_len()),
            transition: Arc::new(transition),
            config,
            frame,
            planar_cache: None,
        })
    }

    pub fn with_posterior(mut self, posterior: ProbabilityVector) -> Result<Self> {
        if posterior.len() != self.config.grid.box_len() {
            return Err(MechanismError::DimensionMismatch {
                expected: self.config.grid.box_len(),
                got: posterior.len(),
            });
        }
        self.posterior = posterior;
        Ok(self)
    }

    pub fn config(&self) -> &MechanismConfig {
        &self.config
    }

    pub fn frame(&self) -> &LocalFrame {
        &self.frame
    }

    pub fn posterior(&self) -> &ProbabilityVector {
        &self.posterior
    }

    pub fn prev_offsets(&self) -> &CellOffsetSet {
        &self.prev_offsets
    }

    pub fn transition(&self) -> &TransitionMatrix {
        &self.transition
    }

    /// Box cells that coincide with a cell of the previous box inherit its
    /// posterior, the rest start at `1/b³`; the mix is renormalized and then
    /// propagated through the transition matrix.
    pub fn carry_forward_prior(&self, new_anchor: CellIndex) -> ProbabilityVector {
        let grid = &self.config.grid;
        let n = grid.box_len();
        let prev = &self.prev_offsets;
        let mut mixed = vec![1.0 / n as f64; n];
        for (i, o) in prev.offsets.iter().enumerate() {
            let cell = new_anchor.shifted(*o);
            if let Some(j) = offset_index(grid, cell.minus(prev.anchor)) {
                mixed[i] = self.posterior.as_slice()[j];
            }
        }
        let mixed = ProbabilityVector::normalized(mixed).unwrap_or_else(|_| ProbabilityVector::uniform(n));
        let prior = self.transition.propagate(mixed.as_slice());
        ProbabilityVector::normalized(prior).unwrap_or_else(|_| ProbabilityVector::uniform(n))
    }

    fn planar_release<R: Rng + ?Sized>(&self, hull: &ConvexBody2<f64>, rng: &mut R) -> Result<Arc<PlanarRelease>> {
        match &self.planar_cache {
            Some(c) if c.hull == *hull => Ok(Arc::clone(c)),
            _ => Ok(Arc::new(PlanarRelease::new(hull, self.config.isotropic_samples, rng)?)),
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, true_position: &GeoPoint, rng: &mut R) -> Result<(ObfuscationResult, MechanismState)> {
        if !true_position.is_finite() {
            return Err(MechanismError::NonFinitePosition);
        }
        let cfg = &self.config;
        let grid = &cfg.grid;
        let true_enu = self.frame.to_enu(true_position);
        let anchor = grid.cell_of(&true_enu);
        let anchor_center = grid.cell_center(anchor);
        let offsets = CellOffsetSet::with_template(anchor, Arc::clone(&self.prev_offsets.offsets));

        let prior = self.carry_forward_prior(anchor);
        let delta_set = delta_location_set(&prior, &offsets, cfg.delta, grid)?;

        let true_rel = true_enu - anchor_center;
        let zero = offsets.zero_index();
        let (base_rel, surrogate_used) = if delta_set.contains_cell(zero) {
            (true_rel, false)
        } else {
            (nearest_cell_center(&delta_set, &offsets, grid, true_rel), true)
        };

        let hull = delta_set.planar_hull.inflate_to_min_half_width(cfg.min_half_width_h);
        let planar = self.planar_release(&hull, rng)?;
        let interval = delta_set.vertical_interval.inflate_to_min_half_width(cfg.min_half_width_v);
        let zh = planar.sample(cfg.epsilon_h, rng)?;
        let zv = release_vertical(&interval, cfg.epsilon_v, rng)?;
        let offset = Enu::new(zh.e, zh.n, zv);

        let base = anchor_center + base_rel;
        let released_enu = base + offset;
        let update = posterior_update(
            &prior,
            &offsets,
            released_enu,
            &planar.gauge,
            interval.width(),
            cfg.epsilon_h,
            cfg.epsilon_v,
            grid,
        )?;

        let result = ObfuscationResult {
            released: self.frame.to_geo(&released_enu),
            released_enu,
            offset,
            base,
            surrogate_used,
            likelihood_fallback: update.fallback,
            delta_set,
        };
        let next = MechanismState {
            config: self.config,
            frame: self.frame,
            transition: Arc::clone(&self.transition),
            posterior: update.posterior,
            prev_offsets: offsets,
            planar_cache: Some(planar),
        };
        Ok((result, next))
    }

    /// [`step`](Self::step) that replaces `self` on success.
    pub fn advance<R: Rng + ?Sized>(&mut self, true_position: &GeoPoint, rng: &mut R) -> Result<ObfuscationResult> {
        let (res, next) = self.step(true_position, rng)?;
        *self = next;
        Ok(res)
    }
}

/// Center of the δ-set cell nearest to `p` (all relative to the anchor
/// center); ties go to the earlier offset.
fn nearest_cell_center(set: &DeltaLocationSet, offsets: &CellOffsetSet, grid: &GridSpec, p: Enu) -> Enu {
    let mut sorted = set.cells.clone();
    sorted.sort_unstable();
    let mut best: Option<(f64, Enu)> = None;
    for i in sorted {
        let c = grid.offset_center(offsets.offsets[i]);
        let d = c.distance(&p);
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, c));
        }
    }
    best.expect("δ-location set is never empty").1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid3() -> GridSpec {
        GridSpec::default()
    }

    fn frame() -> LocalFrame {
        LocalFrame::new(GeoPoint::new(51.4416, 5.4697, 0.0))
    }

    fn state(config: MechanismConfig, m: TransitionMatrix) -> MechanismState {
        let f = frame();
        let start = f.to_geo(&Enu::new(1025.0, 1025.0, 25.0));
        MechanismState::new(config, m, f, &start).unwrap()
    }

    #[test]
    fn offsets_order_and_size() {
        let o = build_offsets(&grid3()).unwrap();
        assert_eq!(o.len(), 27);
        assert_eq!(o[0], CellOffset::new(-1, -1, -1));
        assert_eq!(o[26], CellOffset::new(1, 1, 1));
        assert!(o.contains(&CellOffset::ZERO));
        let g5 = GridSpec { b: 5, ..grid3() };
        assert_eq!(build_offsets(&g5).unwrap().len(), 125);
        assert!(build_offsets(&GridSpec { b: 4, ..grid3() }).is_err());
        for (i, off) in o.iter().enumerate() {
            assert_eq!(offset_index(&grid3(), *off), Some(i));
        }
        assert_eq!(offset_index(&grid3(), CellOffset::new(2, 0, 0)), None);
    }

    #[test]
    fn carry_forward_stationary_keeps_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Vec<f64> = (0..27).map(|_| rng.gen::<f64>()).collect();
        let post = ProbabilityVector::normalized(w).unwrap();
        let s = state(MechanismConfig::default(), TransitionMatrix::identity(27))
            .with_posterior(post.clone())
            .unwrap();
        let prior = s.carry_forward_prior(s.prev_offsets().anchor);
        for (a, b) in prior.as_slice().iter().zip(post.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn carry_forward_far_jump_resets_to_uniform() {
        let mut post = vec![0.0; 27];
        post[13] = 1.0;
        let s = state(MechanismConfig::default(), TransitionMatrix::identity(27))
            .with_posterior(ProbabilityVector::new(post).unwrap())
            .unwrap();
        let a = s.prev_offsets().anchor;
        let prior = s.carry_forward_prior(CellIndex { e: a.e + 3, ..a });
        for v in prior.as_slice() {
            assert!((v - 1.0 / 27.0).abs() < 1e-12);
        }
    }

    #[test]
    fn carry_forward_one_cell_shift_inherits_eighteen() {
        // Previous posterior marks every cell with a distinct value; after a
        // one-cell east shift the de = -1, 0 planes inherit, the de = +1 plane resets.
        let w: Vec<f64> = (0..27).map(|i| 1.0 + i as f64).collect();
        let total: f64 = w.iter().sum();
        let post = ProbabilityVector::normalized(w.clone()).unwrap();
        let s = state(MechanismConfig::default(), TransitionMatrix::identity(27))
            .with_posterior(post)
            .unwrap();
        let a = s.prev_offsets().anchor;
        let prior = s.carry_forward_prior(CellIndex { e: a.e + 1, ..a });
        let offsets = build_offsets(&grid3()).unwrap();
        let reset = 1.0 / 27.0;
        let mixed_total: f64 = (0..27)
            .map(|i| {
                let o = offsets[i];
                if o.de < 1 {
                    w[offset_index(&grid3(), CellOffset::new(o.de + 1, o.dn, o.dalt)).unwrap()] / total
                } else {
                    reset
                }
            })
            .sum();
        let mut inherited = 0;
        for (i, o) in offsets.iter().enumerate() {
            let expect = if o.de < 1 {
                inherited += 1;
                w[offset_index(&grid3(), CellOffset::new(o.de + 1, o.dn, o.dalt)).unwrap()] / total
            } else {
                reset
            } / mixed_total;
            assert!((prior.as_slice()[i] - expect).abs() < 1e-12);
        }
        assert_eq!(inherited, 18);
        assert!((prior.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn offsets_at_origin() -> CellOffsetSet {
        CellOffsetSet::new(&grid3(), CellIndex { e: 0, n: 0, alt: 0 }).unwrap()
    }

    #[test]
    fn delta_set_prefix_rule() {
        let mut p = vec![0.0; 27];
        p[4] = 0.5;
        p[9] = 0.3;
        p[20] = 0.15;
        p[2] = 0.05;
        let prior = ProbabilityVector::new(p).unwrap();
        let set = delta_location_set(&prior, &offsets_at_origin(), 0.1, &grid3()).unwrap();
        assert_eq!(set.cells, vec![4, 9, 20]);
        assert!((set.mass - 0.95).abs() < 1e-12);
        let all = delta_location_set(&prior, &offsets_at_origin(), 0.0, &grid3()).unwrap();
        assert_eq!(all.cells, vec![4, 9, 20, 2]);
        let uni = delta_location_set(&ProbabilityVector::uniform(27), &offsets_at_origin(), 0.01, &grid3()).unwrap();
        assert_eq!(uni.cells.len(), 27);
        assert_eq!(uni.planar_hull.len(), 4);
        assert!((uni.planar_hull.area() - 150.0 * 150.0).abs() < 1e-9);
        assert_eq!((uni.vertical_interval.lo(), uni.vertical_interval.hi()), (-15.0, 15.0));
        assert!(delta_location_set(&prior, &offsets_at_origin(), 1.0, &grid3()).is_err());
    }

    #[test]
    fn gamma_radius_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (shape, eps) in [(PLANAR_GAMMA_SHAPE, 0.1), (VERTICAL_GAMMA_SHAPE, 2.0)] {
            let n = 100_000;
            let mean: f64 = (0..n).map(|_| gamma_radius(shape, eps, &mut rng).unwrap()).sum::<f64>() / n as f64;
            assert!((mean / (shape / eps) - 1.0).abs() < 0.02, "shape {shape}: {mean}");
        }
        assert!(gamma_radius(3.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn planar_release_scales_inversely_with_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let hull = convex_hull(&[
            Point2::new(-75.0, -75.0),
            Point2::new(75.0, -75.0),
            Point2::new(75.0, 25.0),
            Point2::new(-25.0, 75.0),
        ])
        .unwrap();
        let rel = PlanarRelease::new(&hull, 1000, &mut rng).unwrap();
        let n = 100_000;
        let m1: f64 = (0..n).map(|_| rel.sample(0.1, &mut rng).unwrap().norm()).sum::<f64>() / n as f64;
        let m2: f64 = (0..n).map(|_| rel.sample(0.2, &mut rng).unwrap().norm()).sum::<f64>() / n as f64;
        assert!((m1 / m2 - 2.0).abs() < 0.1, "{m1} / {m2}");
        assert!(release_planar(&hull, 0.5, &mut rng).unwrap().is_finite());
    }

    #[test]
    fn planar_release_has_k_norm_gamma_radius() {
        // ‖z#‖_K = r ‖z'‖_{TK}; its mean is E[r] · E[‖U‖_K] with U uniform in K,
        // and E[‖U‖_K] = d / (d + 1) = 2/3 for a planar body.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let hull = convex_hull(&[Point2::new(0.0, 0.0), Point2::new(4.0, 0.0), Point2::new(0.0, 1.0)]).unwrap();
        let rel = PlanarRelease::new(&hull, 1000, &mut rng).unwrap();
        let eps = 0.5;
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rel.gauge.norm(rel.sample(eps, &mut rng).unwrap())).sum::<f64>() / n as f64;
        let want = 3.0 / eps * 2.0 / 3.0;
        assert!((mean / want - 1.0).abs() < 0.02, "{mean} vs {want}");
    }

    #[test]
    fn vertical_release_moments_and_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let iv = Interval1::new(-15.0, 15.0).unwrap();
        let (eps, w) = (0.5, 30.0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| release_vertical(&iv, eps, &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * (var / n as f64).sqrt());
        // |z#| = r |z'| with E|z'| = w/2, E r = 2/ε.
        let mean_abs = xs.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
        assert!((mean_abs / (2.0 / eps * w / 2.0) - 1.0).abs() < 0.02);

        // Density ∝ exp(-ε|x|/w): Laplace with scale w/ε. Bin masses from the CDF.
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let scale = w / eps;
        let cdf = |x: f64| if x < 0.0 { 0.5 * (x / scale).exp() } else { 1.0 - 0.5 * (-x / scale).exp() };
        let edges: Vec<f64> = (0..=40).map(|i| -4.0 * scale + i as f64 * 0.2 * scale).collect();
        let mut stat = 0.0;
        let mut bins = 0;
        for e in edges.windows(2) {
            let count = xs.iter().filter(|x| **x >= e[0] && **x < e[1]).count() as f64;
            let expected = n as f64 * (cdf(e[1]) - cdf(e[0]));
            stat += (count - expected).powi(2) / expected;
            bins += 1;
        }
        let tail_count = xs.iter().filter(|x| x.abs() >= 4.0 * scale).count() as f64;
        let tail_exp = n as f64 * 2.0 * (1.0 - cdf(4.0 * scale));
        stat += (tail_count - tail_exp).powi(2) / tail_exp;
        let pval = 1.0 - ChiSquared::new(bins as f64).unwrap().cdf(stat);
        assert!(pval > 0.01, "chi2 {stat} p {pval}");
    }

    fn full_box_gauge() -> MinkowskiGauge<f64> {
        let set = delta_location_set(&ProbabilityVector::uniform(27), &offsets_at_origin(), 0.0, &grid3()).unwrap();
        MinkowskiGauge::new(&sensitivity_hull(&set.planar_hull).unwrap()).unwrap()
    }

    #[test]
    fn posterior_constant_likelihood_returns_prior() {
        let offs = offsets_at_origin();
        let g = grid3();
        let (a, b) = (
            offset_index(&g, CellOffset::new(-1, 0, 0)).unwrap(),
            offset_index(&g, CellOffset::new(1, 0, 0)).unwrap(),
        );
        let mut p = vec![0.0; 27];
        p[a] = 0.7;
        p[b] = 0.3;
        let prior = ProbabilityVector::new(p).unwrap();
        let z = g.cell_center(offs.anchor);
        let up = posterior_update(&prior, &offs, z, &full_box_gauge(), 30.0, 0.5, 0.5, &g).unwrap();
        assert!(!up.fallback);
        for (x, y) in up.posterior.as_slice().iter().zip(prior.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_peaks_at_release_cell() {
        let offs = offsets_at_origin();
        let g = grid3();
        let prior = ProbabilityVector::uniform(27);
        for j in 0..27 {
            let z = g.cell_center(offs.cell(j));
            let up = posterior_update(&prior, &offs, z, &full_box_gauge(), 30.0, 1.0, 1.0, &g).unwrap();
            assert_eq!(up.posterior.argmax(), j);
        }
    }

    #[test]
    fn posterior_normalized_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let offs = offsets_at_origin();
        let g = grid3();
        for _ in 0..200 {
            let prior = ProbabilityVector::normalized((0..27).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let z = Enu::new(rng.gen_range(-2e3..2e3), rng.gen_range(-2e3..2e3), rng.gen_range(-200.0..200.0));
            let eps = rng.gen_range(0.001..50.0);
            let up = posterior_update(&prior, &offs, z, &full_box_gauge(), 30.0, eps, eps, &g).unwrap();
            assert!(!up.fallback);
            let s: f64 = up.posterior.as_slice().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(up.posterior.as_slice().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn posterior_fallback_on_non_finite_likelihood() {
        let prior = ProbabilityVector::uniform(3);
        let up = bayes_from_log_likelihood(&prior, &[f64::NAN, f64::NAN, f64::NAN]);
        assert!(up.fallback);
        assert_eq!(up.posterior, prior);
    }

    #[test]
    fn step_without_tail_never_substitutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut s = state(MechanismConfig::new(0.5, 0.0), TransitionMatrix::uniform(27));
        let f = *s.frame();
        for t in 0..300 {
            let p = f.to_geo(&Enu::new(1000.0 + 3.0 * t as f64, 1000.0 + t as f64, 20.0));
            let r = s.advance(&p, &mut rng).unwrap();
            assert!(!r.surrogate_used);
            let back = r.base + r.offset;
            assert!(back.distance(&r.released_enu) < 1e-9);
            assert!(r.base.distance(&f.to_enu(&p)) < 1e-6);
        }
    }

    #[test]
    fn stationary_drone_posterior_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut s = state(MechanismConfig::new(1.0, 0.01), TransitionMatrix::identity(27));
        let f = *s.frame();
        let p = f.to_geo(&Enu::new(1025.0, 1025.0, 25.0));
        let mut argmaxes = Vec::new();
        for _ in 0..1000 {
            s.advance(&p, &mut rng).unwrap();
            argmaxes.push(s.posterior().argmax());
        }
        let last = *argmaxes.last().unwrap();
        assert!(argmaxes[900..].iter().all(|a| *a == last));
        assert_eq!(last, s.prev_offsets().zero_index());
        assert!(s.posterior().as_slice()[last] > 0.99);
    }

    #[test]
    fn surrogate_used_when_true_cell_outside_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = grid3();
        let far = offset_index(&g, CellOffset::new(1, 1, 0)).unwrap();
        let mut post = vec![0.0; 27];
        post[far] = 1.0;
        let s = state(MechanismConfig::new(0.5, 0.01), TransitionMatrix::identity(27))
            .with_posterior(ProbabilityVector::new(post).unwrap())
            .unwrap();
        let f = *s.frame();
        let truth = f.to_enu(&f.to_geo(&Enu::new(1025.0, 1025.0, 25.0)));
        let (r, next) = s.step(&f.to_geo(&truth), &mut rng).unwrap();
        assert!(r.surrogate_used);
        assert_eq!(r.delta_set.cells, vec![far]);
        let anchor_center = g.cell_center(g.cell_of(&truth));
        let want = anchor_center + g.offset_center(CellOffset::new(1, 1, 0));
        assert!(r.base.distance(&want) < 1e-9);
        assert!((r.base + r.offset).distance(&r.released_enu) < 1e-9);
        assert!((next.posterior().as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn step_is_deterministic_and_leaves_state_on_error() {
        let s = state(MechanismConfig::new(0.1, 0.01), TransitionMatrix::uniform(27));
        let f = *s.frame();
        let p = f.to_geo(&Enu::new(1010.0, 990.0, 12.0));
        let (a, _) = s.step(&p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (b, _) = s.step(&p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let bad = GeoPoint::new(f64::NAN, 0.0, 0.0);
        assert_eq!(s.step(&bad, &mut ChaCha8Rng::seed_from_u64(3)).unwrap_err(), MechanismError::NonFinitePosition);
    }

    #[test]
    fn transition_builders_are_stochastic() {
        let g = grid3();
        let track: Vec<Enu> = (0..500).map(|t| Enu::new(t as f64 * 7.0, (t as f64 * 0.1).sin() * 80.0, 20.0)).collect();
        let m = TransitionMatrix::from_track(&g, &track).unwrap();
        assert!(TransitionMatrix::new(27, m.m.clone()).is_ok());
        // Eastward motion dominates: from the center, moving +1 east beats moving -1 east.
        let c = offset_index(&g, CellOffset::ZERO).unwrap();
        let east = offset_index(&g, CellOffset::new(1, 0, 0)).unwrap();
        let west = offset_index(&g, CellOffset::new(-1, 0, 0)).unwrap();
        assert!(m.row(c)[east] > m.row(c)[west]);
        assert!(TransitionMatrix::new(2, vec![0.5, 0.5, 0.2, 0.2]).is_err());
        assert!(TransitionMatrix::new(2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MechanismConfig::new(0.0, 0.01).validate().is_err());
        assert!(MechanismConfig::new(0.1, 1.0).validate().is_err());
        assert!(MechanismConfig { isotropic_samples: 50, ..Default::default() }.validate().is_err());
        assert_eq!(MechanismConfig::new(0.3, 0.01).total_epsilon(), 0.6);
    }
}
