//! ECIES encryption of the true location into a fixed-size report.
//!
//! Flow: fresh ephemeral key pair, ECDH with the recipient key, KDF2/SHA-256
//! over `Z || ephemeral_pk` expanded into `enc_key(16) || iv(16) || mac_key(32)`,
//! AES-128-CTR over one padded 16-byte block, HMAC-SHA256 over the ciphertext.
//!
//! Public keys are uncompressed affine coordinates `x || y` without the SEC1
//! tag byte. BN254 and BLS48556 are size-faithful emulations: BN254 runs on
//! P-256 (same 64-byte key) and BLS48556 runs on P-521 with its 132-byte key
//! zero-padded to 140 bytes.

use std::fmt;
use std::str::FromStr;

use aes::cipher::{KeyIvInit, StreamCipher};
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

type Aes128Ctr = ctr::Ctr128BE<aes::Aes128>;
type HmacSha256 = Hmac<Sha256>;

pub const CIPHERTEXT_LEN: usize = 16;
pub const TAG_LEN: usize = 32;
pub const PLAINTEXT_LEN: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("unsupported curve: {0}")]
    UnsupportedCurve(String),
    #[error("invalid public key")]
    InvalidPublicKey,
    #[error("invalid secret key")]
    InvalidSecretKey,
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("malformed report: {0}")]
    MalformedReport(String),
}

/// Curves from the evaluated deployment set, with their wire key sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveProfile {
    Bn254,
    Nist256,
    Nist384,
    Nist521,
    Bls48556,
}

impl CurveProfile {
    pub const ALL: [CurveProfile; 5] = [
        CurveProfile::Bn254,
        CurveProfile::Nist256,
        CurveProfile::Nist384,
        CurveProfile::Nist521,
        CurveProfile::Bls48556,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurveProfile::Bn254 => "bn254",
            CurveProfile::Nist256 => "nist256",
            CurveProfile::Nist384 => "nist384",
            CurveProfile::Nist521 => "nist521",
            CurveProfile::Bls48556 => "bls48556",
        }
    }

    pub fn ephemeral_key_len(self) -> usize {
        match self {
            CurveProfile::Bn254 | CurveProfile::Nist256 => 64,
            CurveProfile::Nist384 => 96,
            CurveProfile::Nist521 => 132,
            CurveProfile::Bls48556 => 140,
        }
    }

    pub fn security_bits(self) -> u32 {
        match self {
            CurveProfile::Bn254 => 100,
            CurveProfile::Nist256 => 128,
            CurveProfile::Nist384 => 192,
            CurveProfile::Nist521 | CurveProfile::Bls48556 => 256,
        }
    }

    /// Whether the profile is backed by a different curve of the same key size.
    pub fn is_emulated(self) -> bool {
        matches!(self, CurveProfile::Bn254 | CurveProfile::Bls48556)
    }

    pub fn report_len(self) -> usize {
        self.ephemeral_key_len() + CIPHERTEXT_LEN + TAG_LEN
    }

    fn backend(self) -> Backend {
        match self {
            CurveProfile::Bn254 | CurveProfile::Nist256 => Backend::P256,
            CurveProfile::Nist384 => Backend::P384,
            CurveProfile::Nist521 | CurveProfile::Bls48556 => Backend::P521,
        }
    }
}

impl fmt::Display for CurveProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CurveProfile {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "bn254" => Ok(CurveProfile::Bn254),
            "nist256" | "secp256r1" | "p256" => Ok(CurveProfile::Nist256),
            "nist384" | "secp384r1" | "p384" => Ok(CurveProfile::Nist384),
            "nist521" | "secp521r1" | "p521" => Ok(CurveProfile::Nist521),
            "bls48556" => Ok(CurveProfile::Bls48556),
            _ => Err(CryptoError::UnsupportedCurve(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Backend {
    P256,
    P384,
    P521,
}

macro_rules! backend_ops {
    ($curve:ident) => {
        mod $curve {
            use super::CryptoError;
            use ::$curve::elliptic_curve::sec1::{FromEncodedPoint, ToEncodedPoint};
            use ::$curve::{AffinePoint, EncodedPoint, PublicKey, SecretKey};
            use rand::{CryptoRng, RngCore};

            pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> (Vec<u8>, Vec<u8>) {
                let sk = SecretKey::random(rng);
                let pk = sk.public_key().to_encoded_point(false);
                (pk.as_bytes()[1..].to_vec(), sk.to_bytes().to_vec())
            }

            pub fn parse_public(raw: &[u8]) -> Result<PublicKey, CryptoError> {
                let mut tagged = Vec::with_capacity(raw.len() + 1);
                tagged.push(0x04);
                tagged.extend_from_slice(raw);
                let ep = EncodedPoint::from_bytes(&tagged).map_err(|_| CryptoError::InvalidPublicKey)?;
                Option::<AffinePoint>::from(AffinePoint::from_encoded_point(&ep))
                    .and_then(|p| PublicKey::from_affine(p).ok())
                    .ok_or(CryptoError::InvalidPublicKey)
            }

            pub fn parse_secret(raw: &[u8]) -> Result<SecretKey, CryptoError> {
                SecretKey::from_slice(raw).map_err(|_| CryptoError::InvalidSecretKey)
            }

            pub fn shared_secret(sk: &SecretKey, pk: &PublicKey) -> Vec<u8> {
                ::$curve::ecdh::diffie_hellman(sk.to_nonzero_scalar(), pk.as_affine())
                    .raw_secret_bytes()
                    .to_vec()
            }

            pub fn public_of(sk: &SecretKey) -> Vec<u8> {
                sk.public_key().to_encoded_point(false).as_bytes()[1..].to_vec()
            }
        }
    };
}

backend_ops!(p256);
backend_ops!(p384);
backend_ops!(p521);

impl Backend {
    fn native_key_len(self) -> usize {
        match self {
            Backend::P256 => 64,
            Backend::P384 => 96,
            Backend::P521 => 132,
        }
    }

    fn generate<R: RngCore + CryptoRng>(self, rng: &mut R) -> (Vec<u8>, Vec<u8>) {
        match self {
            Backend::P256 => p256::generate(rng),
            Backend::P384 => p384::generate(rng),
            Backend::P521 => p521::generate(rng),
        }
    }

    fn validate_public(self, raw: &[u8]) -> Result<(), CryptoError> {
        match self {
            Backend::P256 => p256::parse_public(raw).map(|_| ()),
            Backend::P384 => p384::parse_public(raw).map(|_| ()),
            Backend::P521 => p521::parse_public(raw).map(|_| ()),
        }
    }

    fn public_of(self, sk: &[u8]) -> Result<Vec<u8>, CryptoError> {
        match self {
            Backend::P256 => p256::parse_secret(sk).map(|s| p256::public_of(&s)),
            Backend::P384 => p384::parse_secret(sk).map(|s| p384::public_of(&s)),
            Backend::P521 => p521::parse_secret(sk).map(|s| p521::public_of(&s)),
        }
    }

    fn agree(self, sk: &[u8], pk: &[u8]) -> Result<Vec<u8>, CryptoError> {
        match self {
            Backend::P256 => Ok(p256::shared_secret(&p256::parse_secret(sk)?, &p256::parse_public(pk)?)),
            Backend::P384 => Ok(p384::shared_secret(&p384::parse_secret(sk)?, &p384::parse_public(pk)?)),
            Backend::P521 => Ok(p521::shared_secret(&p521::parse_secret(sk)?, &p521::parse_public(pk)?)),
        }
    }
}

/// Wire public key of `curve` → native backend key bytes.
fn unwrap_public(curve: CurveProfile, pk: &[u8]) -> Result<&[u8], CryptoError> {
    if pk.len() != curve.ephemeral_key_len() {
        return Err(CryptoError::InvalidPublicKey);
    }
    let native = curve.backend().native_key_len();
    let (key, pad) = pk.split_at(native);
    if pad.iter().any(|b| *b != 0) {
        return Err(CryptoError::InvalidPublicKey);
    }
    Ok(key)
}

fn wrap_public(curve: CurveProfile, mut native: Vec<u8>) -> Vec<u8> {
    native.resize(curve.ephemeral_key_len(), 0);
    native
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub curve: CurveProfile,
    pub public_key: Vec<u8>,
    pub secret_key: Vec<u8>,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("curve", &self.curve)
            .field("public_key", &hex_string(&self.public_key))
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    /// Rebuilds a key pair from a stored secret key.
    pub fn from_secret(curve: CurveProfile, secret_key: Vec<u8>) -> Result<Self, CryptoError> {
        let public_key = wrap_public(curve, curve.backend().public_of(&secret_key)?);
        Ok(Self { curve, public_key, secret_key })
    }
}

fn hex_string(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

pub fn kgen<R: RngCore + CryptoRng>(curve: CurveProfile, rng: &mut R) -> KeyPair {
    let (pk, sk) = curve.backend().generate(rng);
    KeyPair { curve, public_key: wrap_public(curve, pk), secret_key: sk }
}

/// True location as fixed-point integers: degrees × 10⁷ and millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PackedLocation {
    pub lat: i32,
    pub lon: i32,
    pub alt: i32,
}

impl PackedLocation {
    pub fn to_bytes(&self) -> [u8; PLAINTEXT_LEN] {
        let mut out = [0u8; PLAINTEXT_LEN];
        out[0..4].copy_from_slice(&self.lat.to_be_bytes());
        out[4..8].copy_from_slice(&self.lon.to_be_bytes());
        out[8..12].copy_from_slice(&self.alt.to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; PLAINTEXT_LEN]) -> Self {
        let word = |i: usize| i32::from_be_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
        Self { lat: word(0), lon: word(4), alt: word(8) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedLocationReport {
    pub ephemeral_key: Vec<u8>,
    pub ciphertext: [u8; CIPHERTEXT_LEN],
    pub tag: [u8; TAG_LEN],
}

impl EncryptedLocationReport {
    pub fn len(&self) -> usize {
        self.ephemeral_key.len() + CIPHERTEXT_LEN + TAG_LEN
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All-zero report of the right size, for codec tests and disabled encryption.
    pub fn zeroed(curve: CurveProfile) -> Self {
        Self {
            ephemeral_key: vec![0; curve.ephemeral_key_len()],
            ciphertext: [0; CIPHERTEXT_LEN],
            tag: [0; TAG_LEN],
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.ephemeral_key);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(curve: CurveProfile, b: &[u8]) -> Result<Self, CryptoError> {
        if b.len() != curve.report_len() {
            return Err(CryptoError::MalformedReport(format!(
                "expected {} bytes, got {}",
                curve.report_len(),
                b.len()
            )));
        }
        let k = curve.ephemeral_key_len();
        let mut ciphertext = [0u8; CIPHERTEXT_LEN];
        ciphertext.copy_from_slice(&b[k..k + CIPHERTEXT_LEN]);
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&b[k + CIPHERTEXT_LEN..]);
        Ok(Self { ephemeral_key: b[..k].to_vec(), ciphertext, tag })
    }
}

struct SessionKeys {
    enc: [u8; 16],
    iv: [u8; 16],
    mac: [u8; 32],
}

/// KDF2 with SHA-256: `H(Z || counter || info)` for counter = 1, 2, ...
fn kdf2(shared: &[u8], info: &[u8], out: &mut [u8]) {
    for (i, chunk) in out.chunks_mut(32).enumerate() {
        let mut h = Sha256::new();
        h.update(shared);
        h.update((i as u32 + 1).to_be_bytes());
        h.update(info);
        let d = h.finalize();
        chunk.copy_from_slice(&d[..chunk.len()]);
    }
}

fn derive(shared: &[u8], ephemeral_pk: &[u8]) -> SessionKeys {
    let mut buf = [0u8; 64];
    kdf2(shared, ephemeral_pk, &mut buf);
    let mut k = SessionKeys { enc: [0; 16], iv: [0; 16], mac: [0; 32] };
    k.enc.copy_from_slice(&buf[..16]);
    k.iv.copy_from_slice(&buf[16..32]);
    k.mac.copy_from_slice(&buf[32..]);
    k
}

fn mac_tag(key: &[u8; 32], ciphertext: &[u8]) -> HmacSha256 {
    let mut m = <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    m.update(ciphertext);
    m
}

/// Length byte, 12 plaintext bytes, 3 zero bytes.
fn pad_block(x: &PackedLocation) -> [u8; CIPHERTEXT_LEN] {
    let mut block = [0u8; CIPHERTEXT_LEN];
    block[0] = PLAINTEXT_LEN as u8;
    block[1..1 + PLAINTEXT_LEN].copy_from_slice(&x.to_bytes());
    block
}

fn unpad_block(block: &[u8; CIPHERTEXT_LEN]) -> Result<PackedLocation, CryptoError> {
    if block[0] as usize != PLAINTEXT_LEN || block[1 + PLAINTEXT_LEN..].iter().any(|b| *b != 0) {
        return Err(CryptoError::MalformedReport("bad padding".into()));
    }
    let mut pt = [0u8; PLAINTEXT_LEN];
    pt.copy_from_slice(&block[1..1 + PLAINTEXT_LEN]);
    Ok(PackedLocation::from_bytes(&pt))
}

pub fn encrypt_location<R: RngCore + CryptoRng>(
    x: &PackedLocation,
    pk: &[u8],
    curve: CurveProfile,
    rng: &mut R,
) -> Result<EncryptedLocationReport, CryptoError> {
    let backend = curve.backend();
    let recipient = unwrap_public(curve, pk)?;
    backend.validate_public(recipient)?;
    let (eph_pk, eph_sk) = backend.generate(rng);
    let shared = backend.agree(&eph_sk, recipient)?;
    let ephemeral_key = wrap_public(curve, eph_pk);
    let keys = derive(&shared, &ephemeral_key);

    let mut ciphertext = pad_block(x);
    Aes128Ctr::new(&keys.enc.into(), &keys.iv.into()).apply_keystream(&mut ciphertext);
    let tag: [u8; TAG_LEN] = mac_tag(&keys.mac, &ciphertext).finalize().into_bytes().into();
    Ok(EncryptedLocationReport { ephemeral_key, ciphertext, tag })
}

/// Verifies the tag before decrypting; a wrong key surfaces as an
/// authentication failure.
pub fn decrypt_location(
    report: &EncryptedLocationReport,
    sk: &[u8],
    curve: CurveProfile,
) -> Result<PackedLocation, CryptoError> {
    let backend = curve.backend();
    if report.ephemeral_key.len() != curve.ephemeral_key_len() {
        return Err(CryptoError::MalformedReport("ephemeral key length".into()));
    }
    let eph = unwrap_public(curve, &report.ephemeral_key).map_err(|_| CryptoError::AuthenticationFailure)?;
    let shared = match backend.agree(sk, eph) {
        Ok(s) => s,
        Err(CryptoError::InvalidPublicKey) => return Err(CryptoError::AuthenticationFailure),
        Err(e) => return Err(e),
    };
    let keys = derive(&shared, &report.ephemeral_key);
    mac_tag(&keys.mac, &report.ciphertext)
        .verify_slice(&report.tag)
        .map_err(|_| CryptoError::AuthenticationFailure)?;
    let mut block = report.ciphertext;
    Aes128Ctr::new(&keys.enc.into(), &keys.iv.into()).apply_keystream(&mut block);
    unpad_block(&block)
}
