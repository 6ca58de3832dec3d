//! Extended RID broadcast message, big-endian fixed layout.
//!
//! | offset | bytes | field                          | encoding              |
//! |-------:|------:|--------------------------------|-----------------------|
//! |      0 |     4 | unique identifier              | u32                   |
//! |      4 |     4 | obfuscated longitude           | i32, degrees × 10⁷    |
//! |      8 |     4 | obfuscated latitude            | i32, degrees × 10⁷    |
//! |     12 |     4 | obfuscated altitude            | i32, millimeters      |
//! |     16 |     2 | longitude velocity             | i16, cm/s             |
//! |     18 |     2 | latitude velocity              | i16, cm/s             |
//! |     20 |     2 | altitude velocity              | i16, cm/s             |
//! |     22 |     4 | control station longitude      | i32, degrees × 10⁷    |
//! |     26 |     4 | control station latitude       | i32, degrees × 10⁷    |
//! |     30 |     4 | control station altitude       | i32, millimeters      |
//! |     34 |     4 | timestamp                      | u32, Unix seconds     |
//! |     38 |     1 | emergency status               | u8, 0 or 1            |
//! |     39 |  K    | ephemeral key                  | curve dependent 64-140|
//! |  39+K  |    16 | ciphertext                     |                       |
//! |  55+K  |    32 | HMAC tag                       |                       |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CurveProfile, EncryptedLocationReport, PackedLocation, CIPHERTEXT_LEN, TAG_LEN};
use crate::frame::GeoPoint;

/// Bytes before the encrypted report.
pub const FIXED_LEN: usize = 39;

/// WiFi MTU; a message must fit in one frame.
pub const WIFI_MTU: usize = 2304;

pub const DEG_SCALE: f64 = 1e7;
pub const ALT_SCALE: f64 = 1e3;
pub const VEL_SCALE: f64 = 1e2;

/// `(field, offset, length)` for the fixed part of the layout.
pub const LAYOUT: [(&str, usize, usize); 12] = [
    ("uid", 0, 4),
    ("obf_lon", 4, 4),
    ("obf_lat", 8, 4),
    ("obf_alt", 12, 4),
    ("vel_lon", 16, 2),
    ("vel_lat", 18, 2),
    ("vel_alt", 20, 2),
    ("cs_lon", 22, 4),
    ("cs_lat", 26, 4),
    ("cs_alt", 30, 4),
    ("timestamp", 34, 4),
    ("emergency", 38, 1),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("field {field} out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("wrong message length: expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("trailing bytes: expected {expected} bytes, got {got}")]
    TrailingBytes { expected: usize, got: usize },
    #[error("invalid emergency flag {0}")]
    InvalidEmergency(u8),
    #[error("report does not match curve {curve}: key length {got}")]
    ReportSize { curve: CurveProfile, got: usize },
}

pub fn message_len(curve: CurveProfile) -> usize {
    FIXED_LEN + curve.report_len()
}

/// Message fields in physical units; encoding quantizes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidMessage {
    pub uid: u32,
    /// Degrees.
    pub obf_lon: f64,
    pub obf_lat: f64,
    /// Meters.
    pub obf_alt: f64,
    /// Meters per second.
    pub vel_lon: f64,
    pub vel_lat: f64,
    pub vel_alt: f64,
    pub cs_lon: f64,
    pub cs_lat: f64,
    pub cs_alt: f64,
    pub timestamp: u32,
    pub emergency: bool,
    #[serde(with = "report_hex")]
    pub report: EncryptedLocationReport,
}

impl RidMessage {
    pub fn obfuscated_position(&self) -> GeoPoint {
        GeoPoint::new(self.obf_lat, self.obf_lon, self.obf_alt)
    }

    pub fn control_station(&self) -> GeoPoint {
        GeoPoint::new(self.cs_lat, self.cs_lon, self.cs_alt)
    }
}

mod report_hex {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        ephemeral_key: String,
        ciphertext: String,
        tag: String,
    }

    pub fn serialize<S: Serializer>(r: &EncryptedLocationReport, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            ephemeral_key: hex::encode(&r.ephemeral_key),
            ciphertext: hex::encode(r.ciphertext),
            tag: hex::encode(r.tag),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<EncryptedLocationReport, D::Error> {
        use serde::de::Error;
        let r = Repr::deserialize(d)?;
        let ephemeral_key = hex::decode(&r.ephemeral_key).map_err(D::Error::custom)?;
        let mut ciphertext = [0u8; CIPHERTEXT_LEN];
        hex::decode_to_slice(&r.ciphertext, &mut ciphertext).map_err(D::Error::custom)?;
        let mut tag = [0u8; TAG_LEN];
        hex::decode_to_slice(&r.tag, &mut tag).map_err(D::Error::custom)?;
        Ok(EncryptedLocationReport { ephemeral_key, ciphertext, tag })
    }
}

fn fixed<T: TryFrom<i64>>(field: &'static str, value: f64, scale: f64, limit: f64) -> Result<T, CodecError> {
    let err = CodecError::OutOfRange { field, value };
    if !value.is_finite() || value.abs() > limit {
        return Err(err);
    }
    T::try_from((value * scale).round() as i64).map_err(|_| err)
}

pub fn lat_to_fixed(field: &'static str, v: f64) -> Result<i32, CodecError> {
    fixed(field, v, DEG_SCALE, 90.0)
}

pub fn lon_to_fixed(field: &'static str, v: f64) -> Result<i32, CodecError> {
    fixed(field, v, DEG_SCALE, 180.0)
}

pub fn alt_to_fixed(field: &'static str, v: f64) -> Result<i32, CodecError> {
    fixed(field, v, ALT_SCALE, f64::INFINITY)
}

pub fn vel_to_fixed(field: &'static str, v: f64) -> Result<i16, CodecError> {
    fixed(field, v, VEL_SCALE, f64::INFINITY)
}

/// True location in the encrypted-report plaintext encoding.
pub fn pack_location(p: &GeoPoint) -> Result<PackedLocation, CodecError> {
    Ok(PackedLocation {
        lat: lat_to_fixed("lat", p.lat)?,
        lon: lon_to_fixed("lon", p.lon)?,
        alt: alt_to_fixed("alt", p.alt)?,
    })
}

pub fn unpack_location(p: &PackedLocation) -> GeoPoint {
    GeoPoint::new(
        p.lat as f64 / DEG_SCALE,
        p.lon as f64 / DEG_SCALE,
        p.alt as f64 / ALT_SCALE,
    )
}

pub fn encode(msg: &RidMessage, curve: CurveProfile) -> Result<Vec<u8>, CodecError> {
    if msg.report.ephemeral_key.len() != curve.ephemeral_key_len() {
        return Err(CodecError::ReportSize { curve, got: msg.report.ephemeral_key.len() });
    }
    let mut out = Vec::with_capacity(message_len(curve));
    out.extend_from_slice(&msg.uid.to_be_bytes());
    out.extend_from_slice(&lon_to_fixed("obf_lon", msg.obf_lon)?.to_be_bytes());
    out.extend_from_slice(&lat_to_fixed("obf_lat", msg.obf_lat)?.to_be_bytes());
    out.extend_from_slice(&alt_to_fixed("obf_alt", msg.obf_alt)?.to_be_bytes());
    out.extend_from_slice(&vel_to_fixed("vel_lon", msg.vel_lon)?.to_be_bytes());
    out.extend_from_slice(&vel_to_fixed("vel_lat", msg.vel_lat)?.to_be_bytes());
    out.extend_from_slice(&vel_to_fixed("vel_alt", msg.vel_alt)?.to_be_bytes());
    out.extend_from_slice(&lon_to_fixed("cs_lon", msg.cs_lon)?.to_be_bytes());
    out.extend_from_slice(&lat_to_fixed("cs_lat", msg.cs_lat)?.to_be_bytes());
    out.extend_from_slice(&alt_to_fixed("cs_alt", msg.cs_alt)?.to_be_bytes());
    out.extend_from_slice(&msg.timestamp.to_be_bytes());
    out.push(u8::from(msg.emergency));
    out.extend_from_slice(&msg.report.to_bytes());
    debug_assert_eq!(out.len(), message_len(curve));
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        a
    }

    fn i32(&mut self) -> i32 {
        i32::from_be_bytes(self.take())
    }

    fn i16(&mut self) -> i16 {
        i16::from_be_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_be_bytes(self.take())
    }
}

pub fn decode(bytes: &[u8], curve: CurveProfile) -> Result<RidMessage, CodecError> {
    let expected = message_len(curve);
    if bytes.len() < expected {
        return Err(CodecError::Length { expected, got: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(CodecError::TrailingBytes { expected, got: bytes.len() });
    }
    let mut r = Reader { buf: bytes, pos: 0 };
    let uid = r.u32();
    let deg = |v: i32| v as f64 / DEG_SCALE;
    let alt = |v: i32| v as f64 / ALT_SCALE;
    let vel = |v: i16| v as f64 / VEL_SCALE;
    let obf_lon = deg(r.i32());
    let obf_lat = deg(r.i32());
    let obf_alt = alt(r.i32());
    let vel_lon = vel(r.i16());
    let vel_lat = vel(r.i16());
    let vel_alt = vel(r.i16());
    let cs_lon = deg(r.i32());
    let cs_lat = deg(r.i32());
    let cs_alt = alt(r.i32());
    let timestamp = r.u32();
    let emergency = match r.take::<1>()[0] {
        0 => false,
        1 => true,
        other => return Err(CodecError::InvalidEmergency(other)),
    };
    let report = EncryptedLocationReport::from_bytes(curve, &bytes[FIXED_LEN..])
        .expect("length checked above");
    Ok(RidMessage {
        uid,
        obf_lon,
        obf_lat,
        obf_alt,
        vel_lon,
        vel_lat,
        vel_alt,
        cs_lon,
        cs_lat,
        cs_alt,
        timestamp,
        emergency,
        report,
    })
}
