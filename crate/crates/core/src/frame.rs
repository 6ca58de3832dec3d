//! Geographic fixes and the local east/north/up frame the mechanism works in.

use serde::{Deserialize, Serialize};

/// Mean Earth radius, meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// WGS-84 style fix: degrees, degrees, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64, alt: f64) -> Self {
        Self { lat, lon, alt }
    }

    pub fn is_finite(&self) -> bool {
        self.lat.is_finite() && self.lon.is_finite() && self.alt.is_finite()
    }
}

/// Position in meters relative to a [`LocalFrame`] origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Enu {
    pub e: f64,
    pub n: f64,
    pub u: f64,
}

impl Enu {
    pub fn new(e: f64, n: f64, u: f64) -> Self {
        Self { e, n, u }
    }

    pub fn horizontal_distance(&self, other: &Enu) -> f64 {
        (self.e - other.e).hypot(self.n - other.n)
    }

    pub fn distance(&self, other: &Enu) -> f64 {
        let d = (self.e - other.e).hypot(self.n - other.n);
        d.hypot(self.u - other.u)
    }

    pub fn is_finite(&self) -> bool {
        self.e.is_finite() && self.n.is_finite() && self.u.is_finite()
    }
}

impl std::ops::Add for Enu {
    type Output = Enu;
    fn add(self, o: Enu) -> Enu {
        Enu::new(self.e + o.e, self.n + o.n, self.u + o.u)
    }
}

impl std::ops::Sub for Enu {
    type Output = Enu;
    fn sub(self, o: Enu) -> Enu {
        Enu::new(self.e - o.e, self.n - o.n, self.u - o.u)
    }
}

/// Equirectangular tangent-plane projection anchored at `origin`. Adequate
/// over a few kilometers; altitude passes through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: GeoPoint,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        Self { origin }
    }

    fn meters_per_deg_lat() -> f64 {
        EARTH_RADIUS_M.to_radians()
    }

    fn meters_per_deg_lon(&self) -> f64 {
        EARTH_RADIUS_M.to_radians() * self.origin.lat.to_radians().cos()
    }

    pub fn to_enu(&self, p: &GeoPoint) -> Enu {
        Enu::new(
            (p.lon - self.origin.lon) * self.meters_per_deg_lon(),
            (p.lat - self.origin.lat) * Self::meters_per_deg_lat(),
            p.alt,
        )
    }

    pub fn to_geo(&self, p: &Enu) -> GeoPoint {
        GeoPoint::new(
            self.origin.lat + p.n / Self::meters_per_deg_lat(),
            self.origin.lon + p.e / self.meters_per_deg_lon(),
            p.u,
        )
    }
}
