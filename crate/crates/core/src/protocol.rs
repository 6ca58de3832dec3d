//! Parties of the disclosure flows, as in-process services: the trusted
//! third party (USS/TTP) with its public and private registries, the
//! no-fly-zone observer, and the location based services that pick a
//! charging station or a service UAV from obfuscated positions.
//!
//! Positions are local meters in the operating-area [`LocalFrame`]; RID
//! messages carry degrees and are projected on receipt.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{unpack_location, RidMessage};
use crate::crypto::{decrypt_location, CryptoError, CurveProfile, KeyPair};
use crate::frame::{Enu, GeoPoint, LocalFrame};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("uid {0} already registered")]
    DuplicateUid(u32),
    #[error("uid {0} not registered")]
    UnknownUid(u32),
    #[error("duplicate station id {0}")]
    DuplicateStation(u32),
    #[error("no candidates to choose from")]
    NoCandidates,
    #[error("invalid no-fly zone: {0}")]
    InvalidNfz(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub registered_at: u64,
}

/// Public identity registry: which UIDs exist, nothing about where they fly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PublicRegistry {
    entries: BTreeMap<u32, RegistrationRecord>,
}

impl PublicRegistry {
    pub fn register(&mut self, uid: u32, registered_at: u64) -> Result<()> {
        if self.entries.contains_key(&uid) {
            return Err(ProtocolError::DuplicateUid(uid));
        }
        self.entries.insert(uid, RegistrationRecord { registered_at });
        Ok(())
    }

    pub fn get(&self, uid: u32) -> Option<&RegistrationRecord> {
        self.entries.get(&uid)
    }

    pub fn contains(&self, uid: u32) -> bool {
        self.entries.contains_key(&uid)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `uid,registered_at` record per line; `#` lines are comments.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# uid,registered_at")?;
        for (uid, rec) in &self.entries {
            writeln!(w, "{uid},{}", rec.registered_at)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, path: &str) -> Result<Self> {
        let mut reg = Self::default();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: String| ProtocolError::Parse { path: path.to_string(), line: lineno + 1, msg };
            let (uid, at) = line.split_once(',').ok_or_else(|| perr("expected uid,registered_at".into()))?;
            let uid = uid.trim().parse().map_err(|e| perr(format!("uid: {e}")))?;
            let at = at.trim().parse().map_err(|e| perr(format!("registered_at: {e}")))?;
            reg.register(uid, at).map_err(|e| perr(e.to_string()))?;
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)?;
        Ok(())
    }
}

/// No-fly zone around a critical infrastructure, with the observer's warning area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NfzSpec {
    /// Horizontal center; the `u` component is ignored.
    pub center: Enu,
    pub nfz_radius: f64,
    pub wa_radius: f64,
}

impl NfzSpec {
    pub fn new(center: Enu, nfz_radius: f64, wa_radius: f64) -> Result<Self> {
        if !(nfz_radius > 0.0 && nfz_radius.is_finite()) {
            return Err(ProtocolError::InvalidNfz(format!("nfz_radius must be positive, got {nfz_radius}")));
        }
        if !(wa_radius >= nfz_radius && wa_radius.is_finite()) {
            return Err(ProtocolError::InvalidNfz(format!(
                "wa_radius {wa_radius} must be >= nfz_radius {nfz_radius}"
            )));
        }
        Ok(Self { center: Enu::new(center.e, center.n, 0.0), nfz_radius, wa_radius })
    }

    pub fn inside_nfz(&self, p: &Enu) -> bool {
        self.center.horizontal_distance(p) <= self.nfz_radius
    }

    pub fn inside_wa(&self, p: &Enu) -> bool {
        self.center.horizontal_distance(p) <= self.wa_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargingStation {
    pub id: u32,
    pub position: Enu,
}

/// Data only the TTP can read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrivateRegistry {
    nfz_specs: Vec<NfzSpec>,
    stations: Vec<ChargingStation>,
}

impl PrivateRegistry {
    pub fn add_nfz(&mut self, spec: NfzSpec) {
        self.nfz_specs.push(spec);
    }

    pub fn add_station(&mut self, station: ChargingStation) -> Result<()> {
        if self.stations.iter().any(|s| s.id == station.id) {
            return Err(ProtocolError::DuplicateStation(station.id));
        }
        self.stations.push(station);
        Ok(())
    }

    /// `nfz,e,n,nfz_radius,wa_radius` and `station,id,e,n,u` records.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# nfz,e,n,nfz_radius,wa_radius | station,id,e,n,u (local meters)")?;
        for s in &self.nfz_specs {
            writeln!(w, "nfz,{},{},{},{}", s.center.e, s.center.n, s.nfz_radius, s.wa_radius)?;
        }
        for s in &self.stations {
            writeln!(w, "station,{},{},{},{}", s.id, s.position.e, s.position.n, s.position.u)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, path: &str) -> Result<Self> {
        let mut reg = Self::default();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: String| ProtocolError::Parse { path: path.to_string(), line: lineno + 1, msg };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let num = |i: usize| -> Result<f64> {
                cols.get(i)
                    .ok_or_else(|| perr(format!("missing column {}", i + 1)))?
                    .parse::<f64>()
                    .map_err(|e| perr(format!("column {}: {e}", i + 1)))
            };
            match cols[0] {
                "nfz" if cols.len() == 5 => {
                    let spec = NfzSpec::new(Enu::new(num(1)?, num(2)?, 0.0), num(3)?, num(4)?)
                        .map_err(|e| perr(e.to_string()))?;
                    reg.add_nfz(spec);
                }
                "station" if cols.len() == 5 => {
                    let id = cols[1].parse().map_err(|e| perr(format!("id: {e}")))?;
                    let st = ChargingStation { id, position: Enu::new(num(2)?, num(3)?, num(4)?) };
                    reg.add_station(st).map_err(|e| perr(e.to_string()))?;
                }
                other => return Err(perr(format!("unrecognized record '{other}'"))),
            }
        }
        Ok(reg)
    }
}

/// Trusted third party: holds the decryption key and both registries.
#[derive(Debug, Clone)]
pub struct Ttp {
    keys: KeyPair,
    pub public: PublicRegistry,
    private: PrivateRegistry,
}

impl Ttp {
    pub fn new(keys: KeyPair) -> Self {
        Self { keys, public: PublicRegistry::default(), private: PrivateRegistry::default() }
    }

    pub fn curve(&self) -> CurveProfile {
        self.keys.curve
    }

    pub fn public_key(&self) -> &[u8] {
        &self.keys.public_key
    }

    /// Stores the UID and hands back the key the UAV encrypts reports under.
    pub fn register_uav(&mut self, uid: u32, now: u64) -> Result<Vec<u8>> {
        register_uav(&mut self.public, uid, now)?;
        Ok(self.keys.public_key.clone())
    }

    pub fn register_nfz(&mut self, spec: NfzSpec) {
        self.private.add_nfz(spec);
    }

    pub fn register_station(&mut self, station: ChargingStation) -> Result<()> {
        self.private.add_station(station)
    }

    pub fn nfz_specs(&self) -> &[NfzSpec] {
        &self.private.nfz_specs
    }

    pub fn stations(&self) -> &[ChargingStation] {
        &self.private.stations
    }

    /// Resolves a forwarded NFZ alert; the plaintext location is released
    /// only for an actual invasion.
    pub fn resolve_invasion(&self, spec: &NfzSpec, msg: &RidMessage, frame: &LocalFrame) -> Result<Disclosure> {
        if !self.public.contains(msg.uid) {
            return Err(ProtocolError::UnknownUid(msg.uid));
        }
        ttp_resolve_invasion(&self.private, spec, msg, &self.keys.secret_key, self.keys.curve, frame)
    }
}

pub fn register_uav(registry: &mut PublicRegistry, uid: u32, now: u64) -> Result<()> {
    registry.register(uid, now)
}

/// Alert an NFZ observer forwards to the TTP.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRequest {
    pub uid: u32,
    pub message: RidMessage,
}

/// Forwards iff the obfuscated horizontal position is within the NFZ radius.
pub fn observer_check_nfz(spec: &NfzSpec, msg: &RidMessage, frame: &LocalFrame) -> Option<ForwardRequest> {
    let obf = frame.to_enu(&msg.obfuscated_position());
    spec.inside_nfz(&obf).then(|| ForwardRequest { uid: msg.uid, message: msg.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disclosure {
    pub uid: u32,
    /// Present only when the UAV is actually inside the NFZ.
    pub location: Option<GeoPoint>,
}

pub fn ttp_resolve_invasion(
    _private: &PrivateRegistry,
    spec: &NfzSpec,
    msg: &RidMessage,
    sk: &[u8],
    curve: CurveProfile,
    frame: &LocalFrame,
) -> Result<Disclosure> {
    let packed = decrypt_location(&msg.report, sk, curve)?;
    let truth = unpack_location(&packed);
    let invading = spec.inside_nfz(&frame.to_enu(&truth));
    Ok(Disclosure { uid: msg.uid, location: invading.then_some(truth) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    /// Disclosed and actual position both inside.
    TP,
    /// Disclosed inside, actual outside.
    FP,
    /// Both outside.
    TN,
    /// Actual inside, disclosed outside.
    FN,
}

impl Classification {
    pub fn from_flags(disclosed_in_nfz: bool, actual_in_nfz: bool) -> Self {
        match (disclosed_in_nfz, actual_in_nfz) {
            (true, true) => Classification::TP,
            (true, false) => Classification::FP,
            (false, false) => Classification::TN,
            (false, true) => Classification::FN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionOutcome {
    pub classification: Classification,
    pub disclosed_in_nfz: bool,
    pub actual_in_nfz: bool,
}

pub fn classify_disclosure(spec: &NfzSpec, true_pos: &Enu, obf_pos: &Enu) -> DetectionOutcome {
    let disclosed_in_nfz = spec.inside_nfz(obf_pos);
    let actual_in_nfz = spec.inside_nfz(true_pos);
    DetectionOutcome {
        classification: Classification::from_flags(disclosed_in_nfz, actual_in_nfz),
        disclosed_in_nfz,
        actual_in_nfz,
    }
}

/// Warning-area counting rule: a disclosure is scored when the true or the
/// obfuscated horizontal position lies in the warning area.
pub fn in_warning_scope(spec: &NfzSpec, true_pos: &Enu, obf_pos: &Enu) -> bool {
    spec.inside_wa(true_pos) || spec.inside_wa(obf_pos)
}

fn argmin_by_distance<'a, I>(candidates: I, target: &Enu) -> Result<u32>
where
    I: IntoIterator<Item = (u32, &'a Enu)>,
{
    let mut best: Option<(f64, u32)> = None;
    for (id, p) in candidates {
        let d = p.distance(target);
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && id < bid),
        };
        if better {
            best = Some((d, id));
        }
    }
    best.map(|(_, id)| id).ok_or(ProtocolError::NoCandidates)
}

/// Station closest to `z` in 3-D; ties go to the smallest id.
pub fn nearest_station(stations: &[ChargingStation], z: &Enu) -> Result<u32> {
    argmin_by_distance(stations.iter().map(|s| (s.id, &s.position)), z)
}

/// Service UAV whose disclosed position is closest to the user; ties go to
/// the smallest uid.
pub fn select_daas_uav(disclosed: &[(u32, Enu)], user: &Enu) -> Result<u32> {
    argmin_by_distance(disclosed.iter().map(|(id, p)| (*id, p)), user)
}

/// Bucketed spatial index over stations answering the same query as
/// [`nearest_station`], for dense layouts.
#[derive(Debug, Clone)]
pub struct StationIndex {
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<ChargingStation>>,
    lo: (i64, i64, i64),
    hi: (i64, i64, i64),
    positions: HashMap<u32, Enu>,
}

impl StationIndex {
    pub fn new(stations: &[ChargingStation], cell: f64) -> Result<Self> {
        if stations.is_empty() {
            return Err(ProtocolError::NoCandidates);
        }
        assert!(cell > 0.0, "bucket size must be positive");
        let key = |p: &Enu| ((p.e / cell).floor() as i64, (p.n / cell).floor() as i64, (p.u / cell).floor() as i64);
        let mut buckets: HashMap<_, Vec<ChargingStation>> = HashMap::new();
        let mut positions = HashMap::with_capacity(stations.len());
        let (mut lo, mut hi) = ((i64::MAX, i64::MAX, i64::MAX), (i64::MIN, i64::MIN, i64::MIN));
        for s in stations {
            if positions.insert(s.id, s.position).is_some() {
                return Err(ProtocolError::DuplicateStation(s.id));
            }
            let k = key(&s.position);
            lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
            hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
            buckets.entry(k).or_default().push(*s);
        }
        Ok(Self { cell, buckets, lo, hi, positions })
    }

    pub fn position(&self, id: u32) -> Option<Enu> {
        self.positions.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn nearest(&self, z: &Enu) -> u32 {
        let c = self.cell;
        let q = [(z.e / c).floor() as i64, (z.n / c).floor() as i64, (z.u / c).floor() as i64];
        let lo = [self.lo.0, self.lo.1, self.lo.2];
        let hi = [self.hi.0, self.hi.1, self.hi.2];
        let r_min = (0..3).map(|i| (lo[i] - q[i]).max(q[i] - hi[i]).max(0)).max().unwrap_or(0);
        let r_max = (0..3).map(|i| (q[i] - lo[i]).abs().max((hi[i] - q[i]).abs())).max().unwrap_or(0);
        let mut best: Option<(f64, u32)> = None;
        let consider = |key: (i64, i64, i64), best: &mut Option<(f64, u32)>| {
            if let Some(bucket) = self.buckets.get(&key) {
                for s in bucket {
                    let d = s.position.distance(z);
                    let better = match *best {
                        None => true,
                        Some((bd, bid)) => d < bd || (d == bd && s.id < bid),
                    };
                    if better {
                        *best = Some((d, s.id));
                    }
                }
            }
        };
        for r in r_min..=r_max {
            let span = |i: usize| (q[i] - r).max(lo[i])..=(q[i] + r).min(hi[i]);
            for x in span(0) {
                for y in span(1) {
                    if (x - q[0]).abs() == r || (y - q[1]).abs() == r {
                        for w in span(2) {
                            consider((x, y, w), &mut best);
                        }
                    } else {
                        for w in [q[2] - r, q[2] + r] {
                            if (lo[2]..=hi[2]).contains(&w) {
                                consider((x, y, w), &mut best);
                            }
                        }
                    }
                }
            }
            // Buckets on later rings are at least r cells away.
            if let Some((bd, _)) = best {
                if bd < r as f64 * c {
                    break;
                }
            }
        }
        best.expect("index is non-empty").1
    }
}

/// Formats stations as the plain record lines used by [`PrivateRegistry`].
pub fn format_stations(stations: &[ChargingStation]) -> String {
    let mut s = String::new();
    for st in stations {
        let _ = writeln!(s, "station,{},{},{},{}", st.id, st.position.e, st.position.n, st.position.u);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::pack_location;
    use crate::crypto::{encrypt_location, kgen, EncryptedLocationReport};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn frame() -> LocalFrame {
        LocalFrame::new(GeoPoint::new(51.4416, 5.4697, 0.0))
    }

    fn msg_at(frame: &LocalFrame, obf: Enu, report: EncryptedLocationReport) -> RidMessage {
        let g = frame.to_geo(&obf);
        RidMessage {
            uid: 7,
            obf_lon: g.lon,
            obf_lat: g.lat,
            obf_alt: g.alt,
            vel_lon: 0.0,
            vel_lat: 0.0,
            vel_alt: 0.0,
            cs_lon: frame.origin.lon,
            cs_lat: frame.origin.lat,
            cs_alt: 0.0,
            timestamp: 0,
            emergency: false,
            report,
        }
    }

    #[test]
    fn registration() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut ttp = Ttp::new(kgen(CurveProfile::Nist256, &mut rng));
        let pk = ttp.register_uav(42, 100).unwrap();
        assert_eq!(pk, ttp.public_key());
        assert!(matches!(ttp.register_uav(42, 101), Err(ProtocolError::DuplicateUid(42))));
        for uid in 1000..2000 {
            ttp.register_uav(uid, uid as u64).unwrap();
        }
        for uid in 1000..2000 {
            assert_eq!(ttp.public.get(uid).unwrap().registered_at, uid as u64);
        }
        assert_eq!(ttp.public.len(), 1001);
    }

    #[test]
    fn public_registry_persistence() {
        let mut reg = PublicRegistry::default();
        for uid in [5, 1, 99] {
            reg.register(uid, uid as u64 * 10).unwrap();
        }
        let mut buf = Vec::new();
        reg.write_to(&mut buf).unwrap();
        assert_eq!(PublicRegistry::read_from(&buf[..], "mem").unwrap(), reg);
        let err = PublicRegistry::read_from(&b"1,2\nx,3\n"[..], "reg.txt").unwrap_err();
        assert_eq!(err.to_string(), "reg.txt:2: uid: invalid digit found in string");
        assert!(PublicRegistry::read_from(&b"1,2\n1,3\n"[..], "r").is_err());
    }

    #[test]
    fn private_registry_persistence() {
        let mut reg = PrivateRegistry::default();
        reg.add_nfz(NfzSpec::new(Enu::new(750.0, 1300.0, 0.0), 500.0, 505.0).unwrap());
        reg.add_station(ChargingStation { id: 3, position: Enu::new(1.5, -2.25, 0.0) }).unwrap();
        assert!(reg.add_station(ChargingStation { id: 3, position: Enu::default() }).is_err());
        let mut buf = Vec::new();
        reg.write_to(&mut buf).unwrap();
        assert_eq!(PrivateRegistry::read_from(&buf[..], "mem").unwrap(), reg);
        assert!(PrivateRegistry::read_from(&b"nfz,0,0,10,5\n"[..], "p").is_err());
        assert!(PrivateRegistry::read_from(&b"tower,1,2\n"[..], "p").is_err());
    }

    #[test]
    fn nfz_spec_validation() {
        assert!(NfzSpec::new(Enu::default(), 500.0, 400.0).is_err());
        assert!(NfzSpec::new(Enu::default(), 0.0, 400.0).is_err());
    }

    #[test]
    fn observer_boundary_rule() {
        let f = frame();
        let spec = NfzSpec::new(Enu::new(0.0, 0.0, 0.0), 500.0, 505.0).unwrap();
        let rep = EncryptedLocationReport::zeroed(CurveProfile::Nist256);
        assert!(observer_check_nfz(&spec, &msg_at(&f, Enu::new(0.0, 0.0, 30.0), rep.clone()), &f).is_some());
        assert!(observer_check_nfz(&spec, &msg_at(&f, Enu::new(501.0, 0.0, 30.0), rep.clone()), &f).is_none());
        // Radius set to the exact projected distance of the message position.
        let m = msg_at(&f, Enu::new(0.0, 400.0, 0.0), rep);
        let d = f.to_enu(&m.obfuscated_position()).horizontal_distance(&Enu::default());
        let exact = NfzSpec::new(Enu::default(), d, d).unwrap();
        assert!(observer_check_nfz(&exact, &m, &f).is_some());
    }

    fn invasion_case(truth: Enu, obf: Enu) -> (Result<Disclosure>, DetectionOutcome) {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let f = frame();
        let mut ttp = Ttp::new(kgen(CurveProfile::Nist256, &mut rng));
        let pk = ttp.register_uav(7, 0).unwrap();
        let spec = NfzSpec::new(Enu::default(), 500.0, 600.0).unwrap();
        ttp.register_nfz(spec);
        let packed = pack_location(&f.to_geo(&truth)).unwrap();
        let report = encrypt_location(&packed, &pk, CurveProfile::Nist256, &mut rng).unwrap();
        let m = msg_at(&f, obf, report);
        let outcome = classify_disclosure(&spec, &truth, &obf);
        (ttp.resolve_invasion(&spec, &m, &f), outcome)
    }

    #[test]
    fn ttp_discloses_only_real_invasions() {
        let (d, o) = invasion_case(Enu::new(100.0, 0.0, 20.0), Enu::new(50.0, 20.0, 25.0));
        let d = d.unwrap();
        assert_eq!(o.classification, Classification::TP);
        let loc = d.location.unwrap();
        assert!(frame().to_enu(&loc).distance(&Enu::new(100.0, 0.0, 20.0)) < 0.05);

        let (d, o) = invasion_case(Enu::new(550.0, 0.0, 20.0), Enu::new(450.0, 0.0, 25.0));
        assert_eq!(o.classification, Classification::FP);
        assert_eq!(d.unwrap(), Disclosure { uid: 7, location: None });
    }

    #[test]
    fn tampered_report_discloses_nothing() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let f = frame();
        let mut ttp = Ttp::new(kgen(CurveProfile::Nist256, &mut rng));
        let pk = ttp.register_uav(7, 0).unwrap();
        let spec = NfzSpec::new(Enu::default(), 500.0, 600.0).unwrap();
        let packed = pack_location(&f.to_geo(&Enu::new(10.0, 10.0, 10.0))).unwrap();
        let mut report = encrypt_location(&packed, &pk, CurveProfile::Nist256, &mut rng).unwrap();
        report.ciphertext[0] ^= 0x80;
        let m = msg_at(&f, Enu::default(), report);
        let err = ttp.resolve_invasion(&spec, &m, &f).unwrap_err();
        assert!(matches!(err, ProtocolError::Crypto(CryptoError::AuthenticationFailure)));
        let mut unknown = m.clone();
        unknown.uid = 8;
        assert!(matches!(ttp.resolve_invasion(&spec, &unknown, &f), Err(ProtocolError::UnknownUid(8))));
    }

    #[test]
    fn classification_truth_table() {
        let spec = NfzSpec::new(Enu::default(), 500.0, 505.0).unwrap();
        let inside = Enu::new(10.0, 0.0, 0.0);
        let outside = Enu::new(800.0, 0.0, 0.0);
        let cases = [
            (outside, outside, Classification::TN),
            (outside, inside, Classification::FP),
            (inside, outside, Classification::FN),
            (inside, inside, Classification::TP),
        ];
        for (t, o, want) in cases {
            let out = classify_disclosure(&spec, &t, &o);
            assert_eq!(out.classification, want);
            assert_eq!(Classification::from_flags(out.disclosed_in_nfz, out.actual_in_nfz), want);
        }
        assert!(!in_warning_scope(&spec, &outside, &outside));
        assert!(in_warning_scope(&spec, &Enu::new(503.0, 0.0, 0.0), &outside));
    }

    #[test]
    fn nearest_selection_basics() {
        assert!(matches!(nearest_station(&[], &Enu::default()), Err(ProtocolError::NoCandidates)));
        assert!(matches!(select_daas_uav(&[], &Enu::default()), Err(ProtocolError::NoCandidates)));
        let one = [ChargingStation { id: 4, position: Enu::new(1.0, 2.0, 3.0) }];
        assert_eq!(nearest_station(&one, &Enu::new(-100.0, 0.0, 0.0)).unwrap(), 4);
        let stations: Vec<_> = (0..10)
            .map(|i| ChargingStation { id: 10 - i, position: Enu::new(i as f64 * 10.0, 0.0, 0.0) })
            .collect();
        assert_eq!(nearest_station(&stations, &Enu::new(30.0, 0.0, 0.0)).unwrap(), 7);
        // Equidistant from ids 6 and 7 → smaller id.
        assert_eq!(nearest_station(&stations, &Enu::new(35.0, 0.0, 0.0)).unwrap(), 6);
        let uavs = [(9, Enu::new(5.0, 0.0, 0.0)), (3, Enu::new(-5.0, 0.0, 0.0))];
        assert_eq!(select_daas_uav(&uavs, &Enu::default()).unwrap(), 3);
        assert_eq!(select_daas_uav(&uavs, &Enu::new(5.0, 0.0, 0.0)).unwrap(), 9);
    }

    #[test]
    fn station_index_matches_linear_scan() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = if trial % 2 == 0 { 40 } else { 400 };
            let stations: Vec<_> = (0..n)
                .map(|i| ChargingStation {
                    id: i,
                    position: Enu::new(
                        (rng.gen_range(0..150) * 10) as f64,
                        (rng.gen_range(0..260) * 10) as f64,
                        (rng.gen_range(0..5) * 10) as f64,
                    ),
                })
                .collect();
            let idx = StationIndex::new(&stations, 10.0 + trial as f64 * 13.0).unwrap();
            for _ in 0..200 {
                let z = Enu::new(rng.gen_range(-500.0..2000.0), rng.gen_range(-500.0..3100.0), rng.gen_range(-50.0..90.0));
                assert_eq!(idx.nearest(&z), nearest_station(&stations, &z).unwrap());
            }
            // Lattice queries exercise exact ties.
            for _ in 0..50 {
                let z = Enu::new((rng.gen_range(0..300) * 5) as f64, (rng.gen_range(0..520) * 5) as f64, 5.0);
                assert_eq!(idx.nearest(&z), nearest_station(&stations, &z).unwrap());
            }
        }
    }
}
