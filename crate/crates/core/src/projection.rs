//! Pinhole camera model: pixel -> ray casting, ray / ground intersection
//! (geolocation) and world point -> pixel reprojection (marker placement).
//!
//! Camera frame: +Z boresight, +X image right, +Y image down. A camera
//! orientation rotates camera-frame vectors into the ENU frame anchored at the
//! mission origin.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{self, EnuFrame, GeodesyError, GeodeticCoord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProjectionError {
    #[error("ray does not reach the ground (pixel views sky or horizon)")]
    RayMissesGround,
    #[error("point lies behind the camera")]
    BehindCamera,
    #[error("camera is not above the ground surface ({0})")]
    CameraBelowGround(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid quaternion: {0}")]
    InvalidQuaternion(String),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
}

/// Square-pixel pinhole intrinsics with the principal point at the frame center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width_px: u32,
    pub height_px: u32,
    pub hfov_deg: f64,
}

impl CameraIntrinsics {
    pub fn new(width_px: u32, height_px: u32, hfov_deg: f64) -> Result<Self, ProjectionError> {
        let intr = Self {
            width_px,
            height_px,
            hfov_deg,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(ProjectionError::InvalidIntrinsics(
                "frame dimensions must be positive".into(),
            ));
        }
        if !(self.hfov_deg.is_finite() && self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(ProjectionError::InvalidIntrinsics(format!(
                "hfov {} outside (0, 180)",
                self.hfov_deg
            )));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        (self.width_px as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan()
    }

    pub fn fy(&self) -> f64 {
        self.fx()
    }

    pub fn cx(&self) -> f64 {
        self.width_px as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.height_px as f64 / 2.0
    }

    pub fn principal_point(&self) -> PixelCoord {
        PixelCoord::new(self.cx(), self.cy())
    }

    /// Vertical field of view implied by the square-pixel model.
    pub fn vfov_deg(&self) -> f64 {
        2.0 * (self.cy() / self.fy()).atan().to_degrees()
    }

    pub fn contains(&self, px: &PixelCoord) -> bool {
        px.u >= 0.0 && px.u < self.width_px as f64 && px.v >= 0.0 && px.v < self.height_px as f64
    }
}

/// Unit quaternion `(w, x, y, z)`.
///
/// Construction normalizes. Components within a few ulp of unit norm are kept
/// as given, which makes construction idempotent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, ProjectionError> {
        let norm = Self::raw_norm(w, x, y, z);
        if !norm.is_finite() || norm < 1e-12 {
            return Err(ProjectionError::InvalidQuaternion(format!(
                "norm {norm} cannot be normalized"
            )));
        }
        if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            Ok(Self { w, x, y, z })
        } else {
            Ok(Self {
                w: w / norm,
                x: x / norm,
                y: y / norm,
                z: z / norm,
            })
        }
    }

    pub fn raw_norm(w: f64, x: f64, y: f64, z: f64) -> f64 {
        (w * w + x * x + y * y + z * z).sqrt()
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn components(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        Self::raw_norm(self.w, self.x, self.y, self.z)
    }

    pub fn to_unit(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(self.w, self.x, self.y, self.z))
    }

    pub fn from_unit(q: &UnitQuaternion<f64>) -> Self {
        let q = q.quaternion();
        Self::new(q.w, q.i, q.j, q.k).expect("unit quaternion has unit norm")
    }

    /// Rotation built from the camera axes expressed in ENU (matrix columns).
    pub fn from_camera_axes(x_axis: Vector3<f64>, y_axis: Vector3<f64>, z_axis: Vector3<f64>) -> Self {
        let m = Matrix3::from_columns(&[x_axis, y_axis, z_axis]);
        let rot = Rotation3::from_matrix_unchecked(m);
        Self::from_unit(&UnitQuaternion::from_rotation_matrix(&rot))
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_unit() * v
    }

    pub fn inverse_rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_unit().inverse_transform_vector(v)
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Quaternion) -> Self {
        Self::from_unit(&(self.to_unit() * other.to_unit()))
    }
}

impl<'de> Deserialize<'de> for Quaternion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            w: f64,
            x: f64,
            y: f64,
            z: f64,
        }
        let r = Raw::deserialize(d)?;
        Quaternion::new(r.w, r.x, r.y, r.z).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: GeodeticCoord,
    /// Rotates camera-frame vectors into the mission-origin ENU frame.
    pub orientation: Quaternion,
}

/// Continuous pixel position, `u` right and `v` down from the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelCoord) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Surface that casted rays are intersected with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GroundModel {
    /// Horizontal plane of the mission ENU frame at ellipsoidal height `ground_alt_m`.
    LocalPlane { ground_alt_m: f64 },
    /// WGS-84 ellipsoid inflated by `offset_alt_m` on both semi-axes.
    Ellipsoid { offset_alt_m: f64 },
}

impl Default for GroundModel {
    fn default() -> Self {
        GroundModel::LocalPlane { ground_alt_m: 0.0 }
    }
}

/// Result of reprojecting a world point that lies in front of the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub pixel: PixelCoord,
    pub in_frame: bool,
}

/// Unit line-of-sight direction in the camera frame for pixel `px`.
pub fn pixel_to_ray(intr: &CameraIntrinsics, px: &PixelCoord) -> Vector3<f64> {
    Vector3::new((px.u - intr.cx()) / intr.fx(), (px.v - intr.cy()) / intr.fy(), 1.0).normalize()
}

/// Orientation for a zero-roll gimbal.
///
/// `heading_deg` is clockwise from north, `pitch_deg` is measured down from
/// the horizon (90° looks straight down). Camera +X stays horizontal.
pub fn pose_from_gimbal(heading_deg: f64, pitch_deg: f64) -> Quaternion {
    let (sin_h, cos_h) = heading_deg.to_radians().sin_cos();
    let (sin_p, cos_p) = pitch_deg.to_radians().sin_cos();
    let z_axis = Vector3::new(sin_h * cos_p, cos_h * cos_p, -sin_p);
    let x_axis = Vector3::new(cos_h, -sin_h, 0.0);
    let y_axis = z_axis.cross(&x_axis);
    Quaternion::from_camera_axes(x_axis, y_axis, z_axis)
}

/// Geolocates the ground point seen at pixel `px`.
pub fn geolocate(
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    px: &PixelCoord,
    ground: &GroundModel,
    mission_origin: &GeodeticCoord,
) -> Result<GeodeticCoord, ProjectionError> {
    let frame = EnuFrame::new(*mission_origin);
    geolocate_in(&frame, pose, intr, px, ground)
}

/// [`geolocate`] with a prebuilt mission frame.
pub fn geolocate_in(
    frame: &EnuFrame,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    px: &PixelCoord,
    ground: &GroundModel,
) -> Result<GeodeticCoord, ProjectionError> {
    let dir_enu = pose.orientation.rotate(&pixel_to_ray(intr, px));
    match *ground {
        GroundModel::LocalPlane { ground_alt_m } => {
            let cam = frame.to_enu(&pose.position);
            let plane_up = ground_alt_m - frame.origin().alt_m();
            if cam.z <= plane_up {
                return Err(ProjectionError::CameraBelowGround(format!(
                    "camera up {:.3} m vs plane {:.3} m",
                    cam.z, plane_up
                )));
            }
            if dir_enu.z > -1e-12 {
                return Err(ProjectionError::RayMissesGround);
            }
            let t = (plane_up - cam.z) / dir_enu.z;
            Ok(frame.from_enu(&(cam + t * dir_enu))?)
        }
        GroundModel::Ellipsoid { offset_alt_m } => {
            if pose.position.alt_m() <= offset_alt_m {
                return Err(ProjectionError::CameraBelowGround(format!(
                    "camera alt {:.3} m vs surface {:.3} m",
                    pose.position.alt_m(),
                    offset_alt_m
                )));
            }
            let origin = pose.position.to_ecef().to_vector();
            let dir = frame.enu_to_ecef_dir(&dir_enu);
            let t = ray_ellipsoid_intersection(&origin, &dir, offset_alt_m)
                .ok_or(ProjectionError::RayMissesGround)?;
            Ok(geodesy::ecef_to_geodetic(&geodesy::EcefPoint::from_vector(
                origin + t * dir,
            ))?)
        }
    }
}

/// Smallest positive `t` with `origin + t·dir` on the ellipsoid whose semi-axes
/// are `a + offset` and `b + offset`.
fn ray_ellipsoid_intersection(origin: &Vector3<f64>, dir: &Vector3<f64>, offset: f64) -> Option<f64> {
    let ea = geodesy::wgs84::A + offset;
    let eb = geodesy::wgs84::B + offset;
    let scale = Vector3::new(1.0 / ea, 1.0 / ea, 1.0 / eb);
    let p = origin.component_mul(&scale);
    let d = dir.component_mul(&scale);

    let a = d.dot(&d);
    let b = 2.0 * p.dot(&d);
    let c = p.dot(&p) - 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 || a == 0.0 {
        return None;
    }
    // Numerically stable pair of roots.
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut roots = [q / a, if q != 0.0 { c / q } else { f64::NAN }];
    roots.sort_by(|x, y| x.total_cmp(y));
    roots.into_iter().find(|t| t.is_finite() && *t > 0.0)
}

/// Reprojects a world point into the camera image.
pub fn project(
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    poi: &GeodeticCoord,
    mission_origin: &GeodeticCoord,
) -> Result<Projection, ProjectionError> {
    let frame = EnuFrame::new(*mission_origin);
    project_in(&frame, pose, intr, poi)
}

/// [`project`] with a prebuilt mission frame.
pub fn project_in(
    frame: &EnuFrame,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    poi: &GeodeticCoord,
) -> Result<Projection, ProjectionError> {
    let rel = frame.to_enu(poi) - frame.to_enu(&pose.position);
    let cam = pose.orientation.inverse_rotate(&rel);
    if cam.z <= 0.0 {
        return Err(ProjectionError::BehindCamera);
    }
    let pixel = PixelCoord::new(
        intr.cx() + intr.fx() * cam.x / cam.z,
        intr.cy() + intr.fy() * cam.y / cam.z,
    );
    Ok(Projection {
        in_frame: intr.contains(&pixel),
        pixel,
    })
}

/// Height of the on-site POI cylinder seen from `dist_m` away.
pub fn marker_height(dist_m: f64) -> f64 {
    5.0 + 0.02 * (dist_m - 10.0).max(0.0)
}
