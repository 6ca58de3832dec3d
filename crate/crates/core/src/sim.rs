//! Trajectories, end-to-end 1 Hz broadcasting and the privacy / utility
//! metrics of the three use cases.
//!
//! Every run owns its random streams, derived from the config seed, the run
//! index and a stream tag, so runs can execute in parallel and a fixed config
//! always yields the same report. Wall-clock generation times are the one
//! nondeterministic quantity and are only collected when `timing` is set.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, encode, message_len, pack_location, unpack_location, CodecError, RidMessage};
use crate::crypto::{encrypt_location, kgen, CryptoError, CurveProfile, KeyPair};
use crate::frame::{Enu, GeoPoint, LocalFrame};
use crate::pim::{GridSpec, MechanismConfig, MechanismError, MechanismState, TransitionMatrix};
use crate::protocol::{
    classify_disclosure, in_warning_scope, nearest_station, observer_check_nfz, select_daas_uav,
    ChargingStation, Classification, NfzSpec, ProtocolError, StationIndex, Ttp,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SimError {
    /// Errors caused by bad input rather than by the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, SimError::Io(_))
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fix {
    /// Seconds.
    pub t: f64,
    pub pos: GeoPoint,
}

/// Time-ordered fixes at a 1 s spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    fixes: Vec<Fix>,
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + (b - a) * w
}

impl Trajectory {
    /// Validates raw samples and resamples them to 1 Hz from the first
    /// timestamp by linear interpolation.
    pub fn from_samples(samples: &[Fix]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(SimError::InvalidTrajectory("no fixes".into()));
        };
        for (i, f) in samples.iter().enumerate() {
            if !f.t.is_finite() || !f.pos.is_finite() {
                return Err(SimError::InvalidTrajectory(format!("fix {i} is not finite")));
            }
            if i > 0 && f.t <= samples[i - 1].t {
                return Err(SimError::InvalidTrajectory(format!("time not increasing at fix {i}")));
            }
        }
        let t0 = first.t;
        let span = samples.last().map_or(0.0, |l| l.t - t0);
        let n = (span + 1e-9).floor() as usize + 1;
        let mut fixes = Vec::with_capacity(n);
        let mut seg = 0;
        for k in 0..n {
            let t = t0 + k as f64;
            while seg + 2 < samples.len() && samples[seg + 1].t < t {
                seg += 1;
            }
            let pos = if samples.len() == 1 {
                first.pos
            } else {
                let (a, b) = (&samples[seg], &samples[seg + 1]);
                let w = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
                GeoPoint::new(lerp(a.pos.lat, b.pos.lat, w), lerp(a.pos.lon, b.pos.lon, w), lerp(a.pos.alt, b.pos.alt, w))
            };
            fixes.push(Fix { t, pos });
        }
        Ok(Self { fixes })
    }

    fn from_enu(frame: &LocalFrame, points: &[Enu]) -> Self {
        let fixes = points.iter().enumerate().map(|(k, p)| Fix { t: k as f64, pos: frame.to_geo(p) }).collect();
        Self { fixes }
    }

    pub fn fixes(&self) -> &[Fix] {
        &self.fixes
    }

    pub fn len(&self) -> usize {
        self.fixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixes.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.fixes.last().map_or(0.0, |l| l.t - self.fixes[0].t)
    }

    pub fn to_enu(&self, frame: &LocalFrame) -> Vec<Enu> {
        self.fixes.iter().map(|f| frame.to_enu(&f.pos)).collect()
    }

    /// Flies the path back and forth until it holds at least `min_len` fixes.
    pub fn extended_to(&self, min_len: usize) -> Self {
        if self.fixes.len() >= min_len {
            return self.clone();
        }
        let n = self.fixes.len();
        let t0 = self.fixes[0].t;
        let mut out = Vec::with_capacity(min_len);
        let (mut i, mut forward) = (0usize, true);
        while out.len() < min_len {
            out.push(Fix { t: t0 + out.len() as f64, pos: self.fixes[i].pos });
            if n == 1 {
                continue;
            }
            if forward && i + 1 == n {
                forward = false;
            } else if !forward && i == 0 {
                forward = true;
            }
            i = if forward { i + 1 } else { i - 1 };
        }
        Self { fixes: out }
    }

    /// Drops the first `skip` fixes and keeps `len`, renumbering time from zero.
    fn window(&self, skip: usize, len: usize) -> Self {
        let fixes = self.fixes[skip..skip + len]
            .iter()
            .enumerate()
            .map(|(k, f)| Fix { t: k as f64, pos: f.pos })
            .collect();
        Self { fixes }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "lat", "lon", "alt"])?;
        for f in &self.fixes {
            wr.write_record([f.t.to_string(), f.pos.lat.to_string(), f.pos.lon.to_string(), f.pos.alt.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Reads a `t,lat,lon,alt` CSV. `name` is used in error messages.
pub fn parse_trajectory<R: Read>(r: R, name: &str) -> Result<Trajectory> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let perr = |line: u64, msg: String| SimError::Parse { path: name.to_string(), line, msg };
    let header = rd.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["t", "lat", "lon", "alt"] {
        return Err(perr(1, format!("expected header t,lat,lon,alt, got {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut samples: Vec<Fix> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            perr(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut v = [0.0f64; 4];
        for (i, (slot, col)) in v.iter_mut().zip(["t", "lat", "lon", "alt"]).enumerate() {
            let raw = rec.get(i).ok_or_else(|| perr(line, format!("missing column {col}")))?;
            *slot = raw.parse().map_err(|_| perr(line, format!("{col}: cannot parse '{raw}'")))?;
            if !slot.is_finite() {
                return Err(perr(line, format!("{col}: not finite")));
            }
        }
        if let Some(prev) = samples.last() {
            if v[0] <= prev.t {
                return Err(perr(line, format!("time {} not after {}", v[0], prev.t)));
            }
        }
        samples.push(Fix { t: v[0], pos: GeoPoint::new(v[1], v[2], v[3]) });
    }
    Trajectory::from_samples(&samples)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let f = std::fs::File::open(path)?;
    parse_trajectory(std::io::BufReader::new(f), &path.display().to_string())
}

/// Operating area: a box with its south-west ground corner at `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Area {
    pub origin: GeoPoint,
    pub width_e: f64,
    pub length_n: f64,
    pub height: f64,
}

impl Default for Area {
    fn default() -> Self {
        Self { origin: GeoPoint::new(51.4416, 5.4697, 0.0), width_e: 1500.0, length_n: 2600.0, height: 40.0 }
    }
}

impl Area {
    pub fn frame(&self) -> LocalFrame {
        LocalFrame::new(self.origin)
    }

    pub fn contains(&self, p: &Enu) -> bool {
        let tol = 1e-6;
        (-tol..=self.width_e + tol).contains(&p.e)
            && (-tol..=self.length_n + tol).contains(&p.n)
            && (-tol..=self.height + tol).contains(&p.u)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, ground: bool) -> Enu {
        let u = if ground { 0.0 } else { rng.gen_range(0.0..=self.height) };
        Enu::new(rng.gen_range(0.0..=self.width_e), rng.gen_range(0.0..=self.length_n), u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Line,
    Lawnmower,
    Loop,
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrajectoryKind::Line => "line",
            TrajectoryKind::Lawnmower => "lawnmower",
            TrajectoryKind::Loop => "loop",
        })
    }
}

impl FromStr for TrajectoryKind {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(TrajectoryKind::Line),
            "lawnmower" => Ok(TrajectoryKind::Lawnmower),
            "loop" => Ok(TrajectoryKind::Loop),
            other => Err(SimError::InvalidConfig(format!("unknown trajectory kind '{other}'"))),
        }
    }
}

/// Points at arc lengths `0, step, 2·step, …` along a polyline, `count` of them.
fn sample_polyline(points: &[(f64, f64)], step: f64, count: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(count);
    let (mut seg, mut seg_start) = (0usize, 0.0);
    for k in 0..count {
        let s = k as f64 * step;
        loop {
            let (a, b) = (points[seg], points[seg + 1]);
            let len = (b.0 - a.0).hypot(b.1 - a.1);
            if s <= seg_start + len + 1e-9 || seg + 2 == points.len() {
                let w = if len > 0.0 { ((s - seg_start) / len).clamp(0.0, 1.0) } else { 0.0 };
                out.push((lerp(a.0, b.0, w), lerp(a.1, b.1, w)));
                break;
            }
            seg_start += len;
            seg += 1;
        }
    }
    out
}

fn polyline_length(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1)).sum()
}

/// Deterministic flight over `area` at constant `speed` (m/s) and constant altitude.
pub fn synth_trajectory(kind: TrajectoryKind, area: &Area, speed: f64, seed: u64) -> Result<Trajectory> {
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(SimError::InvalidTrajectory(format!("speed must be positive, got {speed}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let alt = rng.gen_range(0.25..0.75) * area.height;
    let (w, l) = (area.width_e, area.length_n);
    let path: Vec<(f64, f64)> = match kind {
        TrajectoryKind::Line => {
            let e = rng.gen_range(0.1..0.9) * w;
            let len = (l / speed).floor() * speed;
            vec![(e, 0.0), (e, len)]
        }
        TrajectoryKind::Lawnmower => {
            let lanes = rng.gen_range(4..=8);
            let (e0, e1) = (0.05 * w, 0.95 * w);
            let (n0, n1) = (0.05 * l, 0.95 * l);
            let mut pts = Vec::with_capacity(2 * lanes);
            for i in 0..lanes {
                let e = lerp(e0, e1, i as f64 / (lanes - 1) as f64);
                if i % 2 == 0 {
                    pts.extend([(e, n0), (e, n1)]);
                } else {
                    pts.extend([(e, n1), (e, n0)]);
                }
            }
            pts
        }
        TrajectoryKind::Loop => {
            let (ce, cn) = (w / 2.0, l / 2.0);
            let (mut a, mut b) = (rng.gen_range(0.3..0.45) * w, rng.gen_range(0.3..0.45) * l);
            let ring = |a: f64, b: f64| -> Vec<(f64, f64)> {
                (0..=4096)
                    .map(|i| {
                        let th = std::f64::consts::TAU * (i % 4096) as f64 / 4096.0;
                        (ce + a * th.cos(), cn + b * th.sin())
                    })
                    .collect()
            };
            let p = polyline_length(&ring(a, b));
            let steps = (p / speed).round().max(3.0);
            let scale = steps * speed / p;
            a *= scale;
            b *= scale;
            if a > ce || b > cn {
                return Err(SimError::InvalidTrajectory(format!("speed {speed} too large for a loop in this area")));
            }
            ring(a, b)
        }
    };
    let len = polyline_length(&path);
    let count = (len / speed + 1e-9).floor() as usize + 1;
    let pts: Vec<Enu> = sample_polyline(&path, speed, count).into_iter().map(|(e, n)| Enu::new(e, n, alt)).collect();
    Ok(Trajectory::from_enu(&area.frame(), &pts))
}

fn default_curve() -> CurveProfile {
    CurveProfile::Nist256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// CSV file to load; a synthetic path is flown when absent.
    pub path: Option<PathBuf>,
    pub kind: TrajectoryKind,
    pub speed: f64,
    /// The path is flown back and forth until it has this many fixes.
    pub min_fixes: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { path: None, kind: TrajectoryKind::Line, speed: 5.0, min_fixes: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NfzConfig {
    /// Zone center in local meters; defaults to the middle of the trajectory.
    pub center_e: Option<f64>,
    pub center_n: Option<f64>,
    pub nfz_radius: f64,
    pub wa_radius: f64,
}

impl Default for NfzConfig {
    fn default() -> Self {
        Self { center_e: None, center_n: None, nfz_radius: 500.0, wa_radius: 505.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationConfig {
    /// Stations placed uniformly at random in the area.
    pub count: usize,
    /// When set, a station on every node of a lattice with this spacing
    /// instead, covering the trajectory bounding box plus `lattice_margin`.
    pub lattice_spacing: Option<f64>,
    pub lattice_margin: f64,
}

impl Default for StationConfig {
    fn default() -> Self {
        Self { count: 8, lattice_spacing: None, lattice_margin: 200.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    pub size: usize,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self { size: 6 }
    }
}

/// Experiment configuration, read from `key = value` TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Spent on each of the horizontal and vertical releases.
    pub epsilon: f64,
    pub delta: f64,
    /// When set, `epsilon` is only the starting point and is rescaled until
    /// the mean 3-D release distance hits this value.
    pub target_avg_distance: Option<f64>,
    pub grid: GridSpec,
    #[serde(default = "default_curve")]
    pub curve: CurveProfile,
    pub seed: u64,
    pub runs: usize,
    /// When false the true position is broadcast unchanged.
    pub obfuscate: bool,
    /// Record wall-clock generation times; reports are then not reproducible.
    pub timing: bool,
    pub histogram_bins: usize,
    pub area: Area,
    pub trajectory: TrajectoryConfig,
    pub nfz: NfzConfig,
    pub stations: StationConfig,
    pub fleet: FleetConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            delta: 0.01,
            target_avg_distance: None,
            grid: GridSpec::default(),
            curve: default_curve(),
            seed: 1,
            runs: 5,
            obfuscate: true,
            timing: false,
            histogram_bins: 50,
            area: Area::default(),
            trajectory: TrajectoryConfig::default(),
            nfz: NfzConfig::default(),
            stations: StationConfig::default(),
            fleet: FleetConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn mechanism(&self, epsilon: f64) -> MechanismConfig {
        MechanismConfig { grid: self.grid, ..MechanismConfig::new(epsilon, self.delta) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        self.mechanism(self.epsilon).validate()?;
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be at least 1".into());
        }
        if let Some(t) = self.target_avg_distance {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("target_avg_distance must be positive, got {t}"));
            }
        }
        if !(self.area.width_e > 0.0 && self.area.length_n > 0.0 && self.area.height >= 0.0) {
            return bad("area dimensions must be positive".into());
        }
        if !(self.trajectory.speed > 0.0 && self.trajectory.speed.is_finite()) {
            return bad(format!("trajectory speed must be positive, got {}", self.trajectory.speed));
        }
        NfzSpec::new(Enu::default(), self.nfz.nfz_radius, self.nfz.wa_radius)?;
        if self.stations.count == 0 && self.stations.lattice_spacing.is_none() {
            return bad("stations.count must be at least 1".into());
        }
        if let Some(s) = self.stations.lattice_spacing {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("lattice_spacing must be positive, got {s}"));
            }
        }
        if self.fleet.size == 0 {
            return bad("fleet.size must be at least 1".into());
        }
        Ok(())
    }

    /// The configured trajectory, extended to `min_fixes`.
    pub fn trajectory(&self) -> Result<Trajectory> {
        let base = match &self.trajectory.path {
            Some(p) => load_trajectory(p)?,
            None => synth_trajectory(self.trajectory.kind, &self.area, self.trajectory.speed, self.seed)?,
        };
        Ok(base.extended_to(self.trajectory.min_fixes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Privacy,
    Nfz,
    Charge,
    Daas,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Privacy => "privacy",
            Experiment::Nfz => "nfz",
            Experiment::Charge => "charge",
            Experiment::Daas => "daas",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    #[serde(rename = "TP")]
    pub tp: u64,
    #[serde(rename = "FP")]
    pub fp: u64,
    #[serde(rename = "TN")]
    pub tn: u64,
    #[serde(rename = "FN")]
    pub fn_: u64,
}

impl Confusion {
    pub fn record(&mut self, c: Classification) {
        match c {
            Classification::TP => self.tp += 1,
            Classification::FP => self.fp += 1,
            Classification::TN => self.tn += 1,
            Classification::FN => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` uniform edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Uniform bins over `[0, hi]`; values past either end land in the end bins.
    pub fn build(values: &[f64], hi: f64, bins: usize) -> Self {
        let hi = if hi > 0.0 && hi.is_finite() { hi } else { values.iter().cloned().fold(0.0, f64::max).max(1.0) };
        let width = hi / bins as f64;
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let i = ((v / width).floor().max(0.0) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraDistance {
    pub mean: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenTime {
    /// Seconds.
    pub mean: f64,
    pub max: f64,
}

/// Maximum acceptable per-message generation time, seconds.
pub const MAX_GENERATION_TIME: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: Experiment,
    pub curve: CurveProfile,
    pub epsilon: f64,
    pub runs: usize,
    pub disclosures: u64,
    pub avg_distance_h: f64,
    pub avg_distance_3d: f64,
    pub confusion: Option<Confusion>,
    pub extra_distance: Option<ExtraDistance>,
    pub msg_size: usize,
    pub gen_time: Option<GenTime>,
    /// Messages that took longer than [`MAX_GENERATION_TIME`].
    pub r4_violations: u64,
    pub surrogate_count: u64,
    pub fallback_count: u64,
    /// TTP disclosures of a true location outside the zone, or withheld inside it.
    pub privacy_gate_violations: u64,
}

#[derive(Debug, Default)]
struct RunAcc {
    n: u64,
    sum_h: f64,
    sum_3d: f64,
    confusion: Option<Confusion>,
    extras: Option<Vec<f64>>,
    times: Vec<f64>,
    surrogate: u64,
    fallback: u64,
    gate: u64,
}

impl RunAcc {
    fn record_release(&mut self, truth: &Enu, released: &Enu, b: &Broadcast) {
        self.n += 1;
        self.sum_h += truth.horizontal_distance(released);
        self.sum_3d += truth.distance(released);
        self.surrogate += b.surrogate as u64;
        self.fallback += b.fallback as u64;
        if let Some(t) = b.gen_time {
            self.times.push(t);
        }
    }
}

const MECH_STREAM: u64 = 16;
const CRYPTO_STREAM: u64 = 1;
const LAYOUT_STREAM: u64 = 2;

fn run_rng(seed: u64, run: usize, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

struct Broadcast {
    truth: Enu,
    released: Enu,
    surrogate: bool,
    fallback: bool,
    bytes: Option<Vec<u8>>,
    gen_time: Option<f64>,
}

/// One UAV: its mechanism state and, when messages are built, the key the
/// reports are encrypted under.
struct Broadcaster {
    uid: u32,
    state: Option<MechanismState>,
    frame: LocalFrame,
    control_station: GeoPoint,
    curve: CurveProfile,
    pk: Option<Vec<u8>>,
    prev: Option<(f64, Enu)>,
    timing: bool,
}

impl Broadcaster {
    fn new(cfg: &SimConfig, epsilon: f64, uid: u32, start: &GeoPoint, pk: Option<Vec<u8>>) -> Result<Self> {
        let frame = cfg.area.frame();
        let state = if cfg.obfuscate {
            let mech = cfg.mechanism(epsilon);
            let m = TransitionMatrix::uniform(mech.grid.box_len());
            Some(MechanismState::new(mech, m, frame, start)?)
        } else {
            None
        };
        Ok(Self {
            uid,
            state,
            frame,
            control_station: cfg.area.origin,
            curve: cfg.curve,
            pk,
            prev: None,
            timing: cfg.timing,
        })
    }

    fn broadcast(&mut self, fix: &Fix, mech: &mut ChaCha20Rng, crypto: &mut ChaCha20Rng) -> Result<Broadcast> {
        let started = self.timing.then(Instant::now);
        // The fix at the resolution of the encrypted report, so the TTP and
        // the metrics agree on which side of a boundary the UAV is.
        let packed = pack_location(&fix.pos)?;
        let true_geo = unpack_location(&packed);
        let truth = self.frame.to_enu(&true_geo);
        let (released, released_geo, surrogate, fallback) = match &mut self.state {
            Some(state) => {
                let r = state.advance(&true_geo, mech)?;
                (r.released_enu, r.released, r.surrogate_used, r.likelihood_fallback)
            }
            None => (truth, true_geo, false, false),
        };
        let bytes = match &self.pk {
            Some(pk) => {
                let report = encrypt_location(&packed, pk, self.curve, crypto)?;
                let vel = match self.prev {
                    Some((t, p)) if fix.t > t => {
                        let dt = fix.t - t;
                        let lim = i16::MAX as f64 / codec::VEL_SCALE;
                        let c = |v: f64| (v / dt).clamp(-lim, lim);
                        Enu::new(c(released.e - p.e), c(released.n - p.n), c(released.u - p.u))
                    }
                    _ => Enu::default(),
                };
                let msg = RidMessage {
                    uid: self.uid,
                    obf_lon: released_geo.lon,
                    obf_lat: released_geo.lat,
                    obf_alt: released_geo.alt,
                    vel_lon: vel.e,
                    vel_lat: vel.n,
                    vel_alt: vel.u,
                    cs_lon: self.control_station.lon,
                    cs_lat: self.control_station.lat,
                    cs_alt: self.control_station.alt,
                    timestamp: fix.t.max(0.0) as u32,
                    emergency: false,
                    report,
                };
                Some(encode(&msg, self.curve)?)
            }
            None => None,
        };
        self.prev = Some((fix.t, released));
        let gen_time = started.map(|s| s.elapsed().as_secs_f64());
        Ok(Broadcast { truth, released, surrogate, fallback, bytes, gen_time })
    }
}

fn check_size(b: &Broadcast, curve: CurveProfile) -> Result<()> {
    if let Some(bytes) = &b.bytes {
        if bytes.len() != message_len(curve) {
            return Err(SimError::Codec(CodecError::Length { expected: message_len(curve), got: bytes.len() }));
        }
    }
    Ok(())
}

fn finalize(experiment: Experiment, cfg: &SimConfig, epsilon: f64, accs: Vec<RunAcc>) -> MetricsReport {
    let mut n = 0;
    let (mut sum_h, mut sum_3d) = (0.0, 0.0);
    let mut confusion: Option<Confusion> = None;
    let mut extras: Option<Vec<f64>> = None;
    let mut times = Vec::new();
    let (mut surrogate, mut fallback, mut gate) = (0, 0, 0);
    for a in accs {
        n += a.n;
        sum_h += a.sum_h;
        sum_3d += a.sum_3d;
        if let Some(c) = a.confusion {
            confusion.get_or_insert_with(Confusion::default).merge(&c);
        }
        if let Some(e) = a.extras {
            extras.get_or_insert_with(Vec::new).extend(e);
        }
        times.extend(a.times);
        surrogate += a.surrogate;
        fallback += a.fallback;
        gate += a.gate;
    }
    let avg = |s: f64| if n > 0 { s / n as f64 } else { 0.0 };
    let avg_distance_3d = avg(sum_3d);
    let extra_distance = extras.map(|e| ExtraDistance {
        mean: if e.is_empty() { 0.0 } else { e.iter().sum::<f64>() / e.len() as f64 },
        histogram: Histogram::build(&e, 3.0 * avg_distance_3d, cfg.histogram_bins),
    });
    let gen_time = (!times.is_empty()).then(|| GenTime {
        mean: times.iter().sum::<f64>() / times.len() as f64,
        max: times.iter().cloned().fold(0.0, f64::max),
    });
    MetricsReport {
        experiment,
        curve: cfg.curve,
        epsilon,
        runs: cfg.runs,
        disclosures: n,
        avg_distance_h: avg(sum_h),
        avg_distance_3d,
        confusion,
        extra_distance,
        msg_size: message_len(cfg.curve),
        gen_time,
        r4_violations: times.iter().filter(|&&t| t > MAX_GENERATION_TIME).count() as u64,
        surrogate_count: surrogate,
        fallback_count: fallback,
        privacy_gate_violations: gate,
    }
}

fn parallel_runs<F>(cfg: &SimConfig, f: F) -> Result<Vec<RunAcc>>
where
    F: Fn(usize) -> Result<RunAcc> + Send + Sync,
{
    (0..cfg.runs).into_par_iter().map(f).collect()
}

/// Mean 3-D release distance over all runs without building messages.
fn release_distance(traj: &Trajectory, cfg: &SimConfig, epsilon: f64) -> Result<f64> {
    let accs = parallel_runs(cfg, |run| {
        let mut mech = run_rng(cfg.seed, run, MECH_STREAM);
        let mut crypto = run_rng(cfg.seed, run, CRYPTO_STREAM);
        let mut uav = Broadcaster::new(cfg, epsilon, 1, &traj.fixes()[0].pos, None)?;
        let mut acc = RunAcc::default();
        for fix in traj.fixes() {
            let b = uav.broadcast(fix, &mut mech, &mut crypto)?;
            acc.record_release(&b.truth, &b.released, &b);
        }
        Ok(acc)
    })?;
    let (n, s) = accs.iter().fold((0, 0.0), |(n, s), a| (n + a.n, s + a.sum_3d));
    Ok(if n > 0 { s / n as f64 } else { 0.0 })
}

/// The ε to run with: `cfg.epsilon`, or the value whose mean 3-D release
/// distance on `traj` matches `target_avg_distance`.
pub fn calibrate_epsilon(traj: &Trajectory, cfg: &SimConfig) -> Result<f64> {
    let (Some(target), true) = (cfg.target_avg_distance, cfg.obfuscate) else {
        return Ok(cfg.epsilon);
    };
    let mut eps = cfg.epsilon;
    for _ in 0..6 {
        let d = release_distance(traj, cfg, eps)?;
        if d <= 0.0 {
            break;
        }
        eps *= d / target;
        if (d / target - 1.0).abs() < 1e-9 {
            break;
        }
    }
    Ok(eps)
}

fn ttp_keys(cfg: &SimConfig, run: usize) -> KeyPair {
    kgen(cfg.curve, &mut run_rng(cfg.seed, run, CRYPTO_STREAM + 1000))
}

/// Full broadcast per fix: obfuscation, encryption and encoding, with the
/// release distances, message sizes and generation times.
pub fn run_privacy_experiment(traj: &Trajectory, cfg: &SimConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let epsilon = calibrate_epsilon(traj, cfg)?;
    let accs = parallel_runs(cfg, |run| {
        let mut mech = run_rng(cfg.seed, run, MECH_STREAM);
        let mut crypto = run_rng(cfg.seed, run, CRYPTO_STREAM);
        let keys = ttp_keys(cfg, run);
        let mut uav = Broadcaster::new(cfg, epsilon, run as u32 + 1, &traj.fixes()[0].pos, Some(keys.public_key))?;
        let mut acc = RunAcc::default();
        for fix in traj.fixes() {
            let b = uav.broadcast(fix, &mut mech, &mut crypto)?;
            check_size(&b, cfg.curve)?;
            acc.record_release(&b.truth, &b.released, &b);
        }
        Ok(acc)
    })?;
    Ok(finalize(Experiment::Privacy, cfg, epsilon, accs))
}

/// The no-fly zone of an NFZ experiment: configured center, or halfway
/// between the two middle fixes of the trajectory. The latter keeps a
/// constant-speed path from placing fixes exactly on the boundary.
pub fn nfz_spec(traj: &Trajectory, cfg: &SimConfig) -> Result<NfzSpec> {
    let frame = cfg.area.frame();
    let k = traj.len() / 2;
    let a = frame.to_enu(&traj.fixes()[k.saturating_sub(1)].pos);
    let b = frame.to_enu(&traj.fixes()[k].pos);
    let mid = Enu::new((a.e + b.e) / 2.0, (a.n + b.n) / 2.0, 0.0);
    let center = Enu::new(cfg.nfz.center_e.unwrap_or(mid.e), cfg.nfz.center_n.unwrap_or(mid.n), 0.0);
    Ok(NfzSpec::new(center, cfg.nfz.nfz_radius, cfg.nfz.wa_radius)?)
}

/// Use case 1. Every message is decoded by the observer; forwarded ones are
/// resolved by the TTP. Disclosures are scored when the true or the
/// broadcast position lies in the warning area.
pub fn run_nfz_experiment(traj: &Trajectory, cfg: &SimConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let epsilon = calibrate_epsilon(traj, cfg)?;
    let spec = nfz_spec(traj, cfg)?;
    let frame = cfg.area.frame();
    let accs = parallel_runs(cfg, |run| {
        let mut mech = run_rng(cfg.seed, run, MECH_STREAM);
        let mut crypto = run_rng(cfg.seed, run, CRYPTO_STREAM);
        let mut ttp = Ttp::new(ttp_keys(cfg, run));
        ttp.register_nfz(spec);
        let uid = run as u32 + 1;
        let pk = ttp.register_uav(uid, 0)?;
        let mut uav = Broadcaster::new(cfg, epsilon, uid, &traj.fixes()[0].pos, Some(pk))?;
        let mut acc = RunAcc { confusion: Some(Confusion::default()), ..RunAcc::default() };
        for fix in traj.fixes() {
            let b = uav.broadcast(fix, &mut mech, &mut crypto)?;
            check_size(&b, cfg.curve)?;
            let bytes = b.bytes.as_deref().expect("messages are built");
            let msg = codec::decode(bytes, cfg.curve)?;
            let seen = frame.to_enu(&msg.obfuscated_position());
            acc.record_release(&b.truth, &b.released, &b);
            let outcome = classify_disclosure(&spec, &b.truth, &seen);
            if let Some(fwd) = observer_check_nfz(&spec, &msg, &frame) {
                let d = ttp.resolve_invasion(&spec, &fwd.message, &frame)?;
                if d.location.is_some() != outcome.actual_in_nfz {
                    acc.gate += 1;
                }
            }
            if in_warning_scope(&spec, &b.truth, &seen) {
                acc.confusion.as_mut().expect("set above").record(outcome.classification);
            }
        }
        Ok(acc)
    })?;
    Ok(finalize(Experiment::Nfz, cfg, epsilon, accs))
}

/// Station layout for one run.
pub fn station_layout(traj: &Trajectory, cfg: &SimConfig, run: usize) -> Vec<ChargingStation> {
    let frame = cfg.area.frame();
    match cfg.stations.lattice_spacing {
        Some(s) => {
            let pts = traj.to_enu(&frame);
            let m = cfg.stations.lattice_margin;
            let lo = pts.iter().fold(Enu::new(f64::MAX, f64::MAX, f64::MAX), |a, p| {
                Enu::new(a.e.min(p.e), a.n.min(p.n), a.u.min(p.u))
            });
            let hi = pts.iter().fold(Enu::new(f64::MIN, f64::MIN, f64::MIN), |a, p| {
                Enu::new(a.e.max(p.e), a.n.max(p.n), a.u.max(p.u))
            });
            let axis = |lo: f64, hi: f64| {
                let (a, b) = (((lo - m) / s).floor() as i64, ((hi + m) / s).ceil() as i64);
                (a..=b).map(move |i| i as f64 * s)
            };
            let mut out = Vec::new();
            let mut id = 0u32;
            for e in axis(lo.e, hi.e) {
                for n in axis(lo.n, hi.n) {
                    for u in axis(lo.u, hi.u) {
                        out.push(ChargingStation { id, position: Enu::new(e, n, u) });
                        id += 1;
                    }
                }
            }
            out
        }
        None => {
            let mut rng = run_rng(cfg.seed, run, LAYOUT_STREAM);
            (0..cfg.stations.count as u32)
                .map(|id| ChargingStation { id, position: cfg.area.sample(&mut rng, false) })
                .collect()
        }
    }
}

enum Stations {
    Scan(Vec<ChargingStation>),
    Index(StationIndex),
}

impl Stations {
    fn new(stations: Vec<ChargingStation>, spacing: Option<f64>) -> Result<Self> {
        if stations.len() <= 64 {
            return Ok(Stations::Scan(stations));
        }
        Ok(Stations::Index(StationIndex::new(&stations, 2.0 * spacing.unwrap_or(100.0))?))
    }

    fn nearest(&self, z: &Enu) -> Result<(u32, Enu)> {
        match self {
            Stations::Scan(s) => {
                let id = nearest_station(s, z)?;
                let pos = s.iter().find(|x| x.id == id).expect("returned id exists").position;
                Ok((id, pos))
            }
            Stations::Index(ix) => {
                let id = ix.nearest(z);
                Ok((id, ix.position(id).expect("returned id exists")))
            }
        }
    }
}

/// Use case 2: extra distance flown to the station suggested from the
/// broadcast position instead of the one nearest the true position.
/// Messages are not built; the metric depends on releases only.
pub fn run_station_experiment(traj: &Trajectory, cfg: &SimConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let epsilon = calibrate_epsilon(traj, cfg)?;
    let accs = parallel_runs(cfg, |run| {
        let mut mech = run_rng(cfg.seed, run, MECH_STREAM);
        let mut crypto = run_rng(cfg.seed, run, CRYPTO_STREAM);
        let stations = Stations::new(station_layout(traj, cfg, run), cfg.stations.lattice_spacing)?;
        let mut uav = Broadcaster::new(cfg, epsilon, run as u32 + 1, &traj.fixes()[0].pos, None)?;
        let mut acc = RunAcc { extras: Some(Vec::with_capacity(traj.len())), ..RunAcc::default() };
        for fix in traj.fixes() {
            let b = uav.broadcast(fix, &mut mech, &mut crypto)?;
            acc.record_release(&b.truth, &b.released, &b);
            let (_, suggested) = stations.nearest(&b.released)?;
            let (_, optimal) = stations.nearest(&b.truth)?;
            let extra = b.truth.distance(&suggested) - b.truth.distance(&optimal);
            acc.extras.as_mut().expect("set above").push(extra);
        }
        Ok(acc)
    })?;
    Ok(finalize(Experiment::Charge, cfg, epsilon, accs))
}

/// Use case 3: a ground user picks the service UAV nearest to it by
/// broadcast position; extra distance is against the truly nearest UAV.
pub fn run_daas_experiment(traj: &Trajectory, cfg: &SimConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let epsilon = calibrate_epsilon(traj, cfg)?;
    let len = traj.len();
    let accs = parallel_runs(cfg, |run| {
        let mut layout = run_rng(cfg.seed, run, LAYOUT_STREAM);
        let user = cfg.area.sample(&mut layout, true);
        let mut fleet = Vec::with_capacity(cfg.fleet.size);
        for i in 0..cfg.fleet.size {
            let path = if i == 0 {
                traj.clone()
            } else {
                let seed = cfg.seed.wrapping_add(((run as u64) << 32) | i as u64);
                let base = synth_trajectory(cfg.trajectory.kind, &cfg.area, cfg.trajectory.speed, seed)?;
                let phase = layout.gen_range(0..base.len());
                base.extended_to(len + phase).window(phase, len)
            };
            let uav = Broadcaster::new(cfg, epsilon, i as u32 + 1, &path.fixes()[0].pos, None)?;
            let mech = run_rng(cfg.seed, run, MECH_STREAM + i as u64);
            fleet.push((path, uav, mech));
        }
        let mut crypto = run_rng(cfg.seed, run, CRYPTO_STREAM);
        let mut acc = RunAcc { extras: Some(Vec::with_capacity(len)), ..RunAcc::default() };
        let mut disclosed = Vec::with_capacity(fleet.len());
        let mut truths = Vec::with_capacity(fleet.len());
        for k in 0..len {
            disclosed.clear();
            truths.clear();
            for (path, uav, mech) in fleet.iter_mut() {
                let b = uav.broadcast(&path.fixes()[k], mech, &mut crypto)?;
                acc.record_release(&b.truth, &b.released, &b);
                disclosed.push((uav.uid, b.released));
                truths.push((uav.uid, b.truth));
            }
            let chosen = select_daas_uav(&disclosed, &user)?;
            let optimal = select_daas_uav(&truths, &user)?;
            let pos = |id: u32| truths.iter().find(|(u, _)| *u == id).expect("uid in fleet").1;
            let extra = user.distance(&pos(chosen)) - user.distance(&pos(optimal));
            acc.extras.as_mut().expect("set above").push(extra);
        }
        Ok(acc)
    })?;
    Ok(finalize(Experiment::Daas, cfg, epsilon, accs))
}

pub fn run_experiment(experiment: Experiment, traj: &Trajectory, cfg: &SimConfig) -> Result<MetricsReport> {
    match experiment {
        Experiment::Privacy => run_privacy_experiment(traj, cfg),
        Experiment::Nfz => run_nfz_experiment(traj, cfg),
        Experiment::Charge => run_station_experiment(traj, cfg),
        Experiment::Daas => run_daas_experiment(traj, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(SimError::InvalidConfig(format!("unknown report format '{other}'"))),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

/// Serializes a report. CSV output is `metric,value` rows in a fixed order;
/// histogram vectors are `;`-joined and absent metrics are empty.
pub fn emit_report(report: &MetricsReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report)?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Csv => {
            let opt = |v: Option<String>| v.unwrap_or_default();
            let c = report.confusion;
            let x = report.extra_distance.as_ref();
            let g = report.gen_time;
            let rows: Vec<(&str, String)> = vec![
                ("experiment", report.experiment.to_string()),
                ("curve", report.curve.name().to_string()),
                ("epsilon", report.epsilon.to_string()),
                ("runs", report.runs.to_string()),
                ("disclosures", report.disclosures.to_string()),
                ("avg_distance_h", report.avg_distance_h.to_string()),
                ("avg_distance_3d", report.avg_distance_3d.to_string()),
                ("confusion_tp", opt(c.map(|c| c.tp.to_string()))),
                ("confusion_fp", opt(c.map(|c| c.fp.to_string()))),
                ("confusion_tn", opt(c.map(|c| c.tn.to_string()))),
                ("confusion_fn", opt(c.map(|c| c.fn_.to_string()))),
                ("extra_distance_mean", opt(x.map(|x| x.mean.to_string()))),
                ("extra_distance_edges", opt(x.map(|x| join(&x.histogram.edges)))),
                ("extra_distance_counts", opt(x.map(|x| join(&x.histogram.counts)))),
                ("msg_size", report.msg_size.to_string()),
                ("gen_time_mean", opt(g.map(|g| g.mean.to_string()))),
                ("gen_time_max", opt(g.map(|g| g.max.to_string()))),
                ("r4_violations", report.r4_violations.to_string()),
                ("surrogate_count", report.surrogate_count.to_string()),
                ("fallback_count", report.fallback_count.to_string()),
                ("privacy_gate_violations", report.privacy_gate_violations.to_string()),
            ];
            let mut wr = csv::Writer::from_writer(Vec::new());
            wr.write_record(["metric", "value"])?;
            for (k, v) in rows {
                wr.write_record([k, v.as_str()])?;
            }
            wr.into_inner().map_err(|e| SimError::Io(e.into_error()))
        }
    }
}

/// One released position of an obfuscated trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReleaseRecord {
    pub t: f64,
    pub true_lat: f64,
    pub true_lon: f64,
    pub true_alt: f64,
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    pub surrogate: bool,
    pub fallback: bool,
}

/// Positions one UAV would broadcast along `traj`, using the first run's seed.
pub fn obfuscate_trace(traj: &Trajectory, cfg: &SimConfig) -> Result<Vec<ReleaseRecord>> {
    cfg.validate()?;
    let epsilon = calibrate_epsilon(traj, cfg)?;
    let mut mech = run_rng(cfg.seed, 0, MECH_STREAM);
    let mut crypto = run_rng(cfg.seed, 0, CRYPTO_STREAM);
    let mut uav = Broadcaster::new(cfg, epsilon, 1, &traj.fixes()[0].pos, None)?;
    let frame = cfg.area.frame();
    traj.fixes()
        .iter()
        .map(|fix| {
            let b = uav.broadcast(fix, &mut mech, &mut crypto)?;
            let g = frame.to_geo(&b.released);
            let truth = frame.to_geo(&b.truth);
            Ok(ReleaseRecord {
                t: fix.t,
                true_lat: truth.lat,
                true_lon: truth.lon,
                true_alt: truth.alt,
                lat: g.lat,
                lon: g.lon,
                alt: g.alt,
                surrogate: b.surrogate,
                fallback: b.fallback,
            })
        })
        .collect()
}

pub fn write_releases<W: Write>(records: &[ReleaseRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(runs: usize, min_fixes: usize) -> SimConfig {
        SimConfig {
            runs,
            trajectory: TrajectoryConfig { min_fixes, ..TrajectoryConfig::default() },
            ..SimConfig::default()
        }
    }

    #[test]
    fn two_row_file_interpolates() {
        let csv = "t,lat,lon,alt\n0,51.0,5.0,10\n4,51.0004,5.0,30\n";
        let t = parse_trajectory(csv.as_bytes(), "two.csv").unwrap();
        assert_eq!(t.len(), 5);
        for (k, f) in t.fixes().iter().enumerate() {
            assert_eq!(f.t, k as f64);
            assert!((f.pos.lat - (51.0 + 0.0001 * k as f64)).abs() < 1e-12);
            assert!((f.pos.alt - (10.0 + 5.0 * k as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn irregular_gaps_resample_to_one_hertz() {
        let csv = "t,lat,lon,alt\n10,0,0,0\n10.5,0,0,5\n13.5,0,0,20\n";
        let t = parse_trajectory(csv.as_bytes(), "g").unwrap();
        let alts: Vec<f64> = t.fixes().iter().map(|f| f.pos.alt).collect();
        assert_eq!(alts.len(), 4);
        for (a, want) in alts.iter().zip([0.0, 7.5, 12.5, 17.5]) {
            assert!((a - want).abs() < 1e-9, "{alts:?}");
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_trajectory("t,lat,lon,alt\n0,1,2,3\n1,x,2,3\n".as_bytes(), "f.csv").unwrap_err();
        assert_eq!(err.to_string(), "f.csv:3: lat: cannot parse 'x'");
        let err = parse_trajectory("t,lat,lon,alt\n0,1,2,3\n2,1,2,3\n1,1,2,3\n".as_bytes(), "f.csv").unwrap_err();
        assert!(err.to_string().starts_with("f.csv:4: time"), "{err}");
        assert!(parse_trajectory("t,lat,lon\n0,1,2\n".as_bytes(), "f").is_err());
        assert!(parse_trajectory("t,lat,lon,alt\n0,1,2\n".as_bytes(), "f").is_err());
        assert!(parse_trajectory("t,lat,lon,alt\n".as_bytes(), "f").is_err());
    }

    #[test]
    fn straight_line_fix_count() {
        let area = Area { length_n: 1500.0, ..Area::default() };
        let t = synth_trajectory(TrajectoryKind::Line, &area, 5.0, 3).unwrap();
        assert_eq!(t.len(), 301);
        let pts = t.to_enu(&area.frame());
        assert!(pts[0].n.abs() < 1e-6);
        assert!((pts[300].n - 1500.0).abs() < 1e-6);
        assert!((pts[0].e - pts[300].e).abs() < 1e-6);
    }

    #[test]
    fn synth_paths_stay_in_area_and_keep_speed() {
        let area = Area::default();
        let frame = area.frame();
        for kind in [TrajectoryKind::Line, TrajectoryKind::Lawnmower, TrajectoryKind::Loop] {
            for seed in 0..3 {
                let t = synth_trajectory(kind, &area, 7.0, seed).unwrap();
                assert_eq!(t, synth_trajectory(kind, &area, 7.0, seed).unwrap());
                let pts = t.to_enu(&frame);
                assert!(pts.iter().all(|p| area.contains(p)), "{kind} left the area");
                let steps: Vec<f64> = pts.windows(2).map(|w| w[0].distance(&w[1])).collect();
                let path: f64 = steps.iter().sum();
                assert!((path - 7.0 * t.duration()).abs() < 0.02 * path, "{kind}: {path}");
                if kind == TrajectoryKind::Loop {
                    assert!(pts[0].distance(pts.last().unwrap()) < 1.0);
                }
            }
        }
        assert!(synth_trajectory(TrajectoryKind::Line, &area, 0.0, 1).is_err());
    }

    #[test]
    fn extension_is_continuous() {
        let area = Area::default();
        let t = synth_trajectory(TrajectoryKind::Line, &area, 5.0, 1).unwrap();
        let long = t.extended_to(2000);
        assert_eq!(long.len(), 2000);
        let pts = long.to_enu(&area.frame());
        assert!(pts.windows(2).all(|w| w[0].distance(&w[1]) <= 5.0 + 1e-6));
        assert!(long.fixes().windows(2).all(|w| w[1].t - w[0].t == 1.0));
    }

    #[test]
    fn config_parsing() {
        let cfg = SimConfig::from_toml_str(
            "epsilon = 0.05\nseed = 9\ncurve = \"bls48556\"\n[nfz]\nwa_radius = 600.0\n[grid]\nb = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.epsilon, 0.05);
        assert_eq!(cfg.curve, CurveProfile::Bls48556);
        assert_eq!(cfg.nfz.wa_radius, 600.0);
        assert_eq!(cfg.grid.b, 5);
        assert_eq!(cfg.grid.cell_size_e, 50.0);
        assert!(SimConfig::from_toml_str("epsilon = -1.0").is_err());
        assert!(SimConfig::from_toml_str("bogus = 1").is_err());
        assert!(SimConfig::from_toml_str("[nfz]\nwa_radius = 100.0").is_err());
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(SimConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn disabled_obfuscation_releases_truth() {
        let cfg = SimConfig { obfuscate: false, ..quick(1, 600) };
        let r = run_privacy_experiment(&cfg.trajectory().unwrap(), &cfg).unwrap();
        assert_eq!(r.avg_distance_h, 0.0);
        assert_eq!(r.avg_distance_3d, 0.0);
        assert_eq!(r.disclosures, 600);
    }

    #[test]
    fn reports_are_deterministic() {
        let cfg = quick(2, 200);
        let traj = cfg.trajectory().unwrap();
        for exp in [Experiment::Privacy, Experiment::Nfz, Experiment::Charge, Experiment::Daas] {
            let a = emit_report(&run_experiment(exp, &traj, &cfg).unwrap(), ReportFormat::Json).unwrap();
            let b = emit_report(&run_experiment(exp, &traj, &cfg).unwrap(), ReportFormat::Json).unwrap();
            assert_eq!(a, b, "{exp}");
        }
    }

    #[test]
    fn report_invariants() {
        let cfg = SimConfig { curve: CurveProfile::Bls48556, ..quick(2, 600) };
        let traj = cfg.trajectory().unwrap();
        let r = run_nfz_experiment(&traj, &cfg).unwrap();
        assert_eq!(r.msg_size, 227);
        assert_eq!(r.privacy_gate_violations, 0);
        let c = r.confusion.unwrap();
        let spec = nfz_spec(&traj, &cfg).unwrap();
        assert!(c.total() <= r.disclosures);
        assert!(spec.inside_nfz(&cfg.area.frame().to_enu(&traj.fixes()[traj.len() / 2].pos)));

        let r = run_station_experiment(&traj, &cfg).unwrap();
        let x = r.extra_distance.unwrap();
        assert_eq!(x.histogram.total(), r.disclosures);
        assert_eq!(x.histogram.counts.len(), 50);
        assert!(x.mean >= 0.0);
        let r = run_daas_experiment(&traj, &cfg).unwrap();
        assert_eq!(r.extra_distance.unwrap().histogram.total(), 600 * 2);
        assert_eq!(r.disclosures, 600 * 2 * 6);
    }

    #[test]
    fn calibration_hits_target() {
        let cfg = SimConfig { target_avg_distance: Some(40.0), ..quick(2, 300) };
        let traj = cfg.trajectory().unwrap();
        let r = run_privacy_experiment(&traj, &cfg).unwrap();
        assert!((r.avg_distance_3d - 40.0).abs() < 1e-6 * 40.0, "{}", r.avg_distance_3d);
    }

    #[test]
    fn histogram_edges_and_overflow() {
        let h = Histogram::build(&[], 30.0, 50);
        assert_eq!(h.edges.len(), 51);
        assert_eq!(h.total(), 0);
        let h = Histogram::build(&[0.0, 0.59, 0.61, 29.9, 31.0, 1e9], 30.0, 50);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[49], 3);
    }

    #[test]
    fn csv_report_round_trip() {
        let cfg = quick(1, 100);
        let r = run_station_experiment(&cfg.trajectory().unwrap(), &cfg).unwrap();
        let bytes = emit_report(&r, ReportFormat::Csv).unwrap();
        let mut rd = csv::Reader::from_reader(&bytes[..]);
        let rows: Vec<(String, String)> =
            rd.records().map(|r| r.unwrap()).map(|r| (r[0].to_string(), r[1].to_string())).collect();
        assert_eq!(rows[0], ("experiment".into(), "charge".into()));
        let get = |k: &str| rows.iter().find(|(a, _)| a == k).unwrap().1.clone();
        assert_eq!(get("avg_distance_3d").parse::<f64>().unwrap(), r.avg_distance_3d);
        assert_eq!(get("confusion_tp"), "");
        let counts: u64 = get("extra_distance_counts").split(';').map(|c| c.parse::<u64>().unwrap()).sum();
        assert_eq!(counts, r.disclosures);
        let json = emit_report(&r, ReportFormat::Json).unwrap();
        assert_eq!(serde_json::from_slice::<MetricsReport>(&json).unwrap(), r);
    }

    #[test]
    fn trace_matches_privacy_run() {
        let cfg = quick(1, 100);
        let traj = cfg.trajectory().unwrap();
        let trace = obfuscate_trace(&traj, &cfg).unwrap();
        let frame = cfg.area.frame();
        let mean: f64 = trace
            .iter()
            .map(|r| {
                frame.to_enu(&GeoPoint::new(r.lat, r.lon, r.alt)).distance(&frame.to_enu(&GeoPoint::new(
                    r.true_lat, r.true_lon, r.true_alt,
                )))
            })
            .sum::<f64>()
            / trace.len() as f64;
        let r = run_privacy_experiment(&traj, &cfg).unwrap();
        assert!((mean - r.avg_distance_3d).abs() < 1e-6);
    }
}
