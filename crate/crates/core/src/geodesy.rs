//! WGS-84 coordinate systems: geodetic <-> ECEF, local East-North-Up
//! tangent frames and ellipsoidal geodesic distance.
//!
//! Altitudes are heights above the WGS-84 ellipsoid everywhere in this crate.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS-84 defining constants and the quantities derived from them.
pub mod wgs84 {
    /// Semi-major axis (m).
    pub const A: f64 = 6_378_137.0;
    /// Flattening.
    pub const F: f64 = 1.0 / 298.257_223_563;
    /// Semi-minor axis (m).
    pub const B: f64 = A * (1.0 - F);
    /// First eccentricity squared.
    pub const E2: f64 = F * (2.0 - F);
}

/// Hard cap on the geodetic latitude fixed-point iteration.
pub const ECEF_TO_GEODETIC_MAX_ITER: usize = 20;
const GEODESIC_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeodesyError {
    #[error("invalid geodetic coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("ECEF point too close to the Earth's center to invert")]
    DegenerateEcef,
    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },
}

/// Latitude / longitude in degrees and height above the WGS-84 ellipsoid in meters.
///
/// Construction validates the latitude range and normalizes longitude to
/// `[-180, 180)`. Values already inside that range are stored untouched so
/// that serialization round trips are bit-exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeodetic")]
pub struct GeodeticCoord {
    lat_deg: f64,
    lon_deg: f64,
    alt_m: f64,
}

#[derive(Deserialize)]
struct RawGeodetic {
    lat_deg: f64,
    lon_deg: f64,
    alt_m: f64,
}

impl TryFrom<RawGeodetic> for GeodeticCoord {
    type Error = GeodesyError;

    fn try_from(raw: RawGeodetic) -> Result<Self, Self::Error> {
        GeodeticCoord::new(raw.lat_deg, raw.lon_deg, raw.alt_m)
    }
}

impl GeodeticCoord {
    pub fn new(lat_deg: f64, lon_deg: f64, alt_m: f64) -> Result<Self, GeodesyError> {
        if !lat_deg.is_finite() || !(-90.0..=90.0).contains(&lat_deg) {
            return Err(GeodesyError::InvalidCoordinate(format!(
                "latitude {lat_deg} outside [-90, 90]"
            )));
        }
        if !lon_deg.is_finite() {
            return Err(GeodesyError::InvalidCoordinate(format!(
                "longitude {lon_deg} is not finite"
            )));
        }
        if !alt_m.is_finite() {
            return Err(GeodesyError::InvalidCoordinate(format!(
                "altitude {alt_m} is not finite"
            )));
        }
        Ok(Self {
            lat_deg,
            lon_deg: normalize_lon(lon_deg),
            alt_m,
        })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }

    pub fn alt_m(&self) -> f64 {
        self.alt_m
    }

    /// Same horizontal position at a different ellipsoidal height.
    pub fn with_alt(&self, alt_m: f64) -> Result<Self, GeodesyError> {
        Self::new(self.lat_deg, self.lon_deg, alt_m)
    }

    pub fn to_ecef(&self) -> EcefPoint {
        geodetic_to_ecef(self)
    }
}

fn normalize_lon(lon_deg: f64) -> f64 {
    if (-180.0..180.0).contains(&lon_deg) {
        lon_deg
    } else {
        (lon_deg + 180.0).rem_euclid(360.0) - 180.0
    }
}

/// Earth-Centered Earth-Fixed cartesian position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefPoint {
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
}

impl EcefPoint {
    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self {
            x_m: v.x,
            y_m: v.y,
            z_m: v.z,
        }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x_m, self.y_m, self.z_m)
    }
}

/// Prime vertical radius of curvature at geodetic latitude `lat` (radians).
fn prime_vertical_radius(sin_lat: f64) -> f64 {
    wgs84::A / (1.0 - wgs84::E2 * sin_lat * sin_lat).sqrt()
}

pub fn geodetic_to_ecef(p: &GeodeticCoord) -> EcefPoint {
    let (sin_lat, cos_lat) = p.lat_deg.to_radians().sin_cos();
    let (sin_lon, cos_lon) = p.lon_deg.to_radians().sin_cos();
    let n = prime_vertical_radius(sin_lat);
    EcefPoint {
        x_m: (n + p.alt_m) * cos_lat * cos_lon,
        y_m: (n + p.alt_m) * cos_lat * sin_lon,
        z_m: (n * (1.0 - wgs84::E2) + p.alt_m) * sin_lat,
    }
}

/// Inverts [`geodetic_to_ecef`] by fixed-point iteration on latitude.
///
/// Uses `tan(lat) = (z + e² N sin(lat)) / p` and the height form
/// `h = p cos(lat) + z sin(lat) - a²/N`, both well conditioned at the poles.
/// Iterates until the latitude update stops changing at double precision;
/// the result is accepted once `|Δlat| < 1e-12 rad` and `|Δh| < 1e-6 m`.
pub fn ecef_to_geodetic(p: &EcefPoint) -> Result<GeodeticCoord, GeodesyError> {
    let (x, y, z) = (p.x_m, p.y_m, p.z_m);
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(GeodesyError::InvalidCoordinate(
            "ECEF components must be finite".into(),
        ));
    }
    let rho = x.hypot(y);
    // Inside this radius the normal-line construction is meaningless.
    if rho.hypot(z) < 1.0e3 {
        return Err(GeodesyError::DegenerateEcef);
    }
    let lon = y.atan2(x);

    let height = |lat: f64| {
        let (s, c) = lat.sin_cos();
        rho * c + z * s - wgs84::A * wgs84::A / prime_vertical_radius(s)
    };

    let mut lat = z.atan2(rho * (1.0 - wgs84::E2));
    let mut alt = height(lat);
    let mut accepted = false;
    for _ in 0..ECEF_TO_GEODETIC_MAX_ITER {
        let s = lat.sin();
        let next_lat = (z + wgs84::E2 * prime_vertical_radius(s) * s).atan2(rho);
        let next_alt = height(next_lat);
        let dlat = (next_lat - lat).abs();
        let dalt = (next_alt - alt).abs();
        lat = next_lat;
        alt = next_alt;
        if dlat < 1e-12 && dalt < 1e-6 {
            accepted = true;
        }
        if accepted && dlat <= 1e-15 {
            break;
        }
    }
    if !accepted {
        return Err(GeodesyError::NoConvergence {
            what: "ECEF to geodetic",
            iterations: ECEF_TO_GEODETIC_MAX_ITER,
        });
    }
    GeodeticCoord::new(lat.to_degrees(), lon.to_degrees(), alt)
}

/// Local East-North-Up tangent frame anchored at a geodetic origin.
///
/// The origin's altitude belongs to the frame: `to_enu(origin)` is the zero
/// vector and ENU "up" is measured from the origin's height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnuFrame {
    origin: GeodeticCoord,
    origin_ecef: Vector3<f64>,
    /// Rows are the east, north and up unit vectors expressed in ECEF.
    ecef_to_enu: Matrix3<f64>,
}

impl EnuFrame {
    pub fn new(origin: GeodeticCoord) -> Self {
        let (sin_lat, cos_lat) = origin.lat_deg.to_radians().sin_cos();
        let (sin_lon, cos_lon) = origin.lon_deg.to_radians().sin_cos();
        #[rustfmt::skip]
        let ecef_to_enu = Matrix3::new(
            -sin_lon,            cos_lon,            0.0,
            -sin_lat * cos_lon, -sin_lat * sin_lon, cos_lat,
             cos_lat * cos_lon,  cos_lat * sin_lon, sin_lat,
        );
        Self {
            origin,
            origin_ecef: origin.to_ecef().to_vector(),
            ecef_to_enu,
        }
    }

    pub fn origin(&self) -> GeodeticCoord {
        self.origin
    }

    /// Rotation taking ECEF vectors into this frame's ENU axes.
    pub fn ecef_to_enu_rotation(&self) -> &Matrix3<f64> {
        &self.ecef_to_enu
    }

    pub fn to_enu(&self, p: &GeodeticCoord) -> Vector3<f64> {
        self.ecef_to_enu * (p.to_ecef().to_vector() - self.origin_ecef)
    }

    pub fn from_enu(&self, v: &Vector3<f64>) -> Result<GeodeticCoord, GeodesyError> {
        ecef_to_geodetic(&self.enu_to_ecef_point(v))
    }

    pub fn enu_to_ecef_point(&self, v: &Vector3<f64>) -> EcefPoint {
        EcefPoint::from_vector(self.origin_ecef + self.ecef_to_enu.transpose() * v)
    }

    /// Rotates an ENU direction into ECEF (no translation).
    pub fn enu_to_ecef_dir(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.ecef_to_enu.transpose() * d
    }
}

pub fn enu_from(origin: GeodeticCoord) -> EnuFrame {
    EnuFrame::new(origin)
}

/// Ellipsoidal geodesic distance in meters, ignoring altitude.
///
/// Vincenty's inverse method. Inputs are put in a canonical order first so
/// that `d(p1, p2) == d(p2, p1)` exactly. Fails only for nearly antipodal
/// pairs, which lie far outside the experiment range.
pub fn geodesic_distance(p1: &GeodeticCoord, p2: &GeodeticCoord) -> Result<f64, GeodesyError> {
    let key = |p: &GeodeticCoord| (p.lat_deg, p.lon_deg);
    let (p1, p2) = if key(p1) <= key(p2) { (p1, p2) } else { (p2, p1) };
    vincenty_inverse(
        p1.lat_deg.to_radians(),
        p1.lon_deg.to_radians(),
        p2.lat_deg.to_radians(),
        p2.lon_deg.to_radians(),
    )
}

#[allow(non_snake_case)]
fn vincenty_inverse(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> Result<f64, GeodesyError> {
    use wgs84::{A, B, F};

    let mut L = lon2 - lon1;
    if L > std::f64::consts::PI {
        L -= 2.0 * std::f64::consts::PI;
    } else if L < -std::f64::consts::PI {
        L += 2.0 * std::f64::consts::PI;
    }
    let U1 = ((1.0 - F) * lat1.tan()).atan();
    let U2 = ((1.0 - F) * lat2.tan()).atan();
    let (sin_u1, cos_u1) = U1.sin_cos();
    let (sin_u2, cos_u2) = U2.sin_cos();

    let mut lambda = L;
    for _ in 0..GEODESIC_MAX_ITER {
        let (sin_lambda, cos_lambda) = lambda.sin_cos();
        let t1 = cos_u2 * sin_lambda;
        let t2 = cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lambda;
        let sin_sigma = t1.hypot(t2);
        if sin_sigma == 0.0 {
            return Ok(0.0);
        }
        let cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_lambda;
        let sigma = sin_sigma.atan2(cos_sigma);
        let sin_alpha = cos_u1 * cos_u2 * sin_lambda / sin_sigma;
        let cos2_alpha = 1.0 - sin_alpha * sin_alpha;
        // Equatorial lines have cos²α = 0.
        let cos_2sm = if cos2_alpha == 0.0 {
            0.0
        } else {
            cos_sigma - 2.0 * sin_u1 * sin_u2 / cos2_alpha
        };
        let C = F / 16.0 * cos2_alpha * (4.0 + F * (4.0 - 3.0 * cos2_alpha));
        let prev = lambda;
        lambda = L
            + (1.0 - C)
                * F
                * sin_alpha
                * (sigma
                    + C * sin_sigma
                        * (cos_2sm + C * cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm)));

        if (lambda - prev).abs() < 1e-12 {
            let u2 = cos2_alpha * (A * A - B * B) / (B * B);
            let big_a =
                1.0 + u2 / 16384.0 * (4096.0 + u2 * (-768.0 + u2 * (320.0 - 175.0 * u2)));
            let big_b = u2 / 1024.0 * (256.0 + u2 * (-128.0 + u2 * (74.0 - 47.0 * u2)));
            let delta_sigma = big_b
                * sin_sigma
                * (cos_2sm
                    + big_b / 4.0
                        * (cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm)
                            - big_b / 6.0
                                * cos_2sm
                                * (-3.0 + 4.0 * sin_sigma * sin_sigma)
                                * (-3.0 + 4.0 * cos_2sm * cos_2sm)));
            return Ok(B * big_a * (sigma - delta_sigma));
        }
    }
    Err(GeodesyError::NoConvergence {
        what: "geodesic inverse",
        iterations: GEODESIC_MAX_ITER,
    })
}
