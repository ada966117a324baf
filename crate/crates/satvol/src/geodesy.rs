//! WGS84 geodetic/ECEF conversions and local East-North-Up frames.
//!
//! Heights are ellipsoidal throughout; there is no geoid model. Raster work
//! happens in a local ENU frame anchored at the area of interest, which keeps
//! grid math metric and free of longitude-wrap artifacts.

use thiserror::Error;

/// WGS84 semi-major axis, meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS84 semi-minor axis, meters.
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

#[derive(Debug, Error)]
pub enum GeodesyError {
    #[error("point within {0} m of Earth center is outside the geodetic domain")]
    NearCenter(f64),
    #[error("invalid geodetic point: {0}")]
    InvalidPoint(String),
}

/// Geodetic coordinate triple: longitude and latitude in degrees, ellipsoidal
/// height in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodeticPoint {
    /// Longitude, degrees, positive eastward, in [-180, 180].
    pub lon: f64,
    /// Latitude, degrees, positive northward, in [-90, 90].
    pub lat: f64,
    /// Height above the WGS84 ellipsoid, meters.
    pub height: f64,
}

impl GeodeticPoint {
    pub fn new(lon: f64, lat: f64, height: f64) -> Self {
        Self { lon, lat, height }
    }

    /// Range check on the stored values.
    pub fn is_valid(&self) -> bool {
        self.lon.is_finite()
            && self.lat.is_finite()
            && self.height.is_finite()
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat)
    }
}

/// Earth-centered Earth-fixed Cartesian coordinates, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcefPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Prime-vertical radius of curvature at geodetic latitude `lat_rad`.
fn prime_vertical_radius(lat_rad: f64) -> f64 {
    let s = lat_rad.sin();
    WGS84_A / (1.0 - WGS84_E2 * s * s).sqrt()
}

/// Standard WGS84 forward transform.
pub fn geodetic_to_ecef(p: &GeodeticPoint) -> EcefPoint {
    let lon = p.lon.to_radians();
    let lat = p.lat.to_radians();
    let n = prime_vertical_radius(lat);
    let (sin_lat, cos_lat) = lat.sin_cos();
    let (sin_lon, cos_lon) = lon.sin_cos();
    EcefPoint {
        x: (n + p.height) * cos_lat * cos_lon,
        y: (n + p.height) * cos_lat * sin_lon,
        z: (n * (1.0 - WGS84_E2) + p.height) * sin_lat,
    }
}

/// Inverse of [`geodetic_to_ecef`] by Bowring iteration.
///
/// Capped at 10 iterations; converges below 1e-12 rad in 2-3 for any point
/// outside the near-center exclusion zone.
pub fn ecef_to_geodetic(p: &EcefPoint) -> Result<GeodeticPoint, GeodesyError> {
    const EXCLUSION_M: f64 = 1_000.0;
    let r = p.norm();
    if !r.is_finite() || r < EXCLUSION_M {
        return Err(GeodesyError::NearCenter(EXCLUSION_M));
    }

    let lon = p.y.atan2(p.x);
    let rho = (p.x * p.x + p.y * p.y).sqrt();

    let e2_prime = WGS84_E2 / (1.0 - WGS84_E2);
    // Bowring: iterate on the parametric latitude.
    let mut beta = (p.z * WGS84_A).atan2(rho * WGS84_B);
    let mut lat = 0.0;
    for _ in 0..10 {
        let (sb, cb) = beta.sin_cos();
        lat = (p.z + e2_prime * WGS84_B * sb * sb * sb).atan2(rho - WGS84_E2 * WGS84_A * cb * cb * cb);
        let beta_next = ((1.0 - WGS84_F) * lat.tan()).atan();
        let done = (beta_next - beta).abs() < 1e-12;
        beta = beta_next;
        if done {
            break;
        }
    }
    let (sin_lat, cos_lat) = lat.sin_cos();
    let n = prime_vertical_radius(lat);
    // Near the poles rho/cos(lat) loses precision; switch to the z form.
    let height = if cos_lat.abs() > 1e-8 {
        rho / cos_lat - n
    } else {
        p.z / sin_lat - n * (1.0 - WGS84_E2)
    };

    Ok(GeodeticPoint {
        lon: lon.to_degrees(),
        lat: lat.to_degrees(),
        height,
    })
}

/// Local East-North-Up frame anchored at a geodetic origin.
///
/// Forward and backward transforms compose through ECEF, so the pair is an
/// exact inverse (up to floating point) rather than a small-angle
/// approximation.
#[derive(Debug, Clone, Copy)]
pub struct EnuFrame {
    origin: GeodeticPoint,
    origin_ecef: EcefPoint,
    // Rows: unit east, north, up vectors in ECEF.
    east: [f64; 3],
    north: [f64; 3],
    up: [f64; 3],
}

/// Coordinates in a local ENU frame, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnuPoint {
    pub east: f64,
    pub north: f64,
    pub up: f64,
}

impl EnuPoint {
    pub fn new(east: f64, north: f64, up: f64) -> Self {
        Self { east, north, up }
    }
}

impl EnuFrame {
    pub fn new(origin: GeodeticPoint) -> Self {
        let lon = origin.lon.to_radians();
        let lat = origin.lat.to_radians();
        let (sin_lat, cos_lat) = lat.sin_cos();
        let (sin_lon, cos_lon) = lon.sin_cos();
        Self {
            origin,
            origin_ecef: geodetic_to_ecef(&origin),
            east: [-sin_lon, cos_lon, 0.0],
            north: [-sin_lat * cos_lon, -sin_lat * sin_lon, cos_lat],
            up: [cos_lat * cos_lon, cos_lat * sin_lon, sin_lat],
        }
    }

    pub fn origin(&self) -> GeodeticPoint {
        self.origin
    }

    pub fn origin_ecef(&self) -> EcefPoint {
        self.origin_ecef
    }

    /// Unit east/north/up axes expressed in ECEF.
    pub fn axes(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        (self.east, self.north, self.up)
    }

    pub fn ecef_to_enu(&self, p: &EcefPoint) -> EnuPoint {
        let d = [
            p.x - self.origin_ecef.x,
            p.y - self.origin_ecef.y,
            p.z - self.origin_ecef.z,
        ];
        let dot = |a: &[f64; 3]| a[0] * d[0] + a[1] * d[1] + a[2] * d[2];
        EnuPoint {
            east: dot(&self.east),
            north: dot(&self.north),
            up: dot(&self.up),
        }
    }

    pub fn enu_to_ecef(&self, p: &EnuPoint) -> EcefPoint {
        EcefPoint {
            x: self.origin_ecef.x + self.east[0] * p.east + self.north[0] * p.north + self.up[0] * p.up,
            y: self.origin_ecef.y + self.east[1] * p.east + self.north[1] * p.north + self.up[1] * p.up,
            z: self.origin_ecef.z + self.east[2] * p.east + self.north[2] * p.north + self.up[2] * p.up,
        }
    }

    pub fn geodetic_to_enu(&self, p: &GeodeticPoint) -> EnuPoint {
        self.ecef_to_enu(&geodetic_to_ecef(p))
    }

    pub fn enu_to_geodetic(&self, p: &EnuPoint) -> Result<GeodeticPoint, GeodesyError> {
        ecef_to_geodetic(&self.enu_to_ecef(p))
    }
}
