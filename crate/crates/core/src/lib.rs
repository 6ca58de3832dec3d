//! Location obfuscation for Remote-ID drones.
//!
//! - [`geometry`]: convex hulls, sensitivity hulls, isotropic position and
//!   K-norm gauges, generic over [`Scalar`].
//! - [`pim`]: the per-drone release mechanism over a moving grid box.
//! - [`crypto`]: ECIES encrypted location reports.
//! - [`codec`]: the fixed-layout extended RID broadcast message.
//! - [`protocol`]: registries, the no-fly-zone observer and the location
//!   based services that consume obfuscated positions.
//! - [`sim`]: trajectories, experiment drivers and metrics.

pub mod codec;
pub mod crypto;
pub mod frame;
pub mod geometry;
pub mod pim;
pub mod protocol;
pub mod scalar;
pub mod sim;

pub use scalar::Scalar;

pub type Point2 = geometry::Point2<f64>;
pub type ConvexBody2 = geometry::ConvexBody2<f64>;
pub type Interval1 = geometry::Interval1<f64>;
pub type IsotropicTransform2 = geometry::IsotropicTransform2<f64>;
pub type Mat2 = geometry::Mat2<f64>;

pub type Point2F32 = geometry::Point2<f32>;
pub type ConvexBody2F32 = geometry::ConvexBody2<f32>;
pub type Interval1F32 = geometry::Interval1<f32>;
pub type IsotropicTransform2F32 = geometry::IsotropicTransform2<f32>;

pub use codec::RidMessage;
pub use crypto::{CurveProfile, EncryptedLocationReport, KeyPair, PackedLocation};
pub use frame::{Enu, GeoPoint, LocalFrame};
pub use pim::{GridSpec, MechanismConfig, MechanismState, ObfuscationResult, TransitionMatrix};
pub use protocol::{ChargingStation, NfzSpec, Ttp};
pub use sim::{MetricsReport, SimConfig, Trajectory};
