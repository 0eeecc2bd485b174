//! Geodetic, ECEF, local ENU and camera-frame geometry.
//!
//! Conventions used throughout the crate:
//! - the world frame is an East-North-Up tangent plane anchored at a per-scene
//!   geodetic origin;
//! - the camera frame is the usual pinhole frame: +z forward, +x right, +y down;
//! - a [`WorldCameraTransform`] maps world points into the camera frame,
//!   `P_c = R * P_w + t`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// WGS84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS84 semi-minor axis in meters.
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodeticCoord {
    /// Degrees, positive north.
    pub lat: f64,
    /// Degrees, positive east.
    pub lon: f64,
    /// Meters above the ellipsoid.
    pub alt: f64,
}

impl GeodeticCoord {
    pub fn new(lat: f64, lon: f64, alt: f64) -> Result<Self> {
        let g = Self { lat, lon, alt };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lat.is_finite() && self.lon.is_finite() && self.alt.is_finite()) {
            return Err(Error::InvalidInput("non-finite geodetic coordinate".into()));
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::InvalidInput(format!(
                "latitude/longitude out of range: ({}, {})",
                self.lat, self.lon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

impl From<Vector3<f64>> for WorldPoint {
    fn from(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelCoord) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraIntrinsics {
    /// A 1280x720 sensor with roughly an 85 degree horizontal field of view.
    fn default() -> Self {
        Self {
            fx: 700.0,
            fy: 700.0,
            cx: 640.0,
            cy: 360.0,
            width: 1280.0,
            height: 720.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width
            && self.cy > 0.0
            && self.cy < self.height;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, p: &PixelCoord) -> bool {
        p.u >= 0.0 && p.u < self.width && p.v >= 0.0 && p.v < self.height
    }

    /// Unit-depth ray through a pixel, `(x, y, 1)` in the camera frame.
    pub fn ray(&self, p: &PixelCoord) -> Vector3<f64> {
        Vector3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }

    /// Back-projects a pixel at a given depth (camera-frame z).
    pub fn unproject(&self, p: &PixelCoord, depth: f64) -> Vector3<f64> {
        self.ray(p) * depth
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project_camera(&self, pc: &Vector3<f64>) -> Result<PixelCoord> {
        if pc.z <= 0.0 {
            return Err(Error::PointBehindCamera { z: pc.z });
        }
        Ok(PixelCoord::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }
}

/// Rigid transform from the world frame to the camera frame.
///
/// Also used for the inverse (camera to world) direction; see [`Self::inverse`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransformRepr", from = "TransformRepr")]
pub struct WorldCameraTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    /// Row-major.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<WorldCameraTransform> for TransformRepr {
    fn from(t: WorldCameraTransform) -> Self {
        let r = &t.rotation;
        Self {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl From<TransformRepr> for WorldCameraTransform {
    fn from(r: TransformRepr) -> Self {
        let m = &r.rotation;
        Self {
            rotation: Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            translation: Vector3::from(r.translation),
        }
    }
}

impl Default for WorldCameraTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl WorldCameraTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Camera looking along compass heading `yaw_deg` (clockwise from north), tilted
    /// down by `pitch_deg`, with its optical center at `center` in the world frame.
    pub fn looking_from(center: Vector3<f64>, yaw_deg: f64, pitch_deg: f64) -> Self {
        let (sy, cy) = yaw_deg.to_radians().sin_cos();
        let (sp, cp) = pitch_deg.to_radians().sin_cos();
        let forward = Vector3::new(sy * cp, cy * cp, -sp);
        let right = Vector3::new(cy, -sy, 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        Self {
            rotation,
            translation,
        }
    }

    /// Largest absolute entry of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite());
        if !finite || self.orthonormality_error() > 1e-9 || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("transform rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `[R^T, -R^T t]`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera optical center expressed in the world frame, the translation column of
    /// the inverse transform.
    pub fn camera_origin_world(&self) -> WorldPoint {
        WorldPoint::from(self.inverse().translation)
    }

    /// 4x4 homogeneous matrix.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self` after `other`: `x -> self(other(x))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Geodetic to Earth-centered Earth-fixed coordinates on the WGS84 ellipsoid.
pub fn wgs84_to_ecef(g: &GeodeticCoord) -> Vector3<f64> {
    let (slat, clat) = g.lat.to_radians().sin_cos();
    let (slon, clon) = g.lon.to_radians().sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
    Vector3::new(
        (n + g.alt) * clat * clon,
        (n + g.alt) * clat * slon,
        (n * (1.0 - WGS84_E2) + g.alt) * slat,
    )
}

/// Inverse of [`wgs84_to_ecef`], iterated to sub-micrometer convergence.
pub fn ecef_to_wgs84(p: &Vector3<f64>) -> GeodeticCoord {
    let lon = p.y.atan2(p.x);
    let rho = p.x.hypot(p.y);
    let mut lat = p.z.atan2(rho * (1.0 - WGS84_E2));
    let mut alt = 0.0;
    for _ in 0..20 {
        let slat = lat.sin();
        let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
        let next_alt = if lat.cos().abs() > 1e-10 {
            rho / lat.cos() - n
        } else {
            p.z.abs() / slat.abs() - n * (1.0 - WGS84_E2)
        };
        let next_lat = p.z.atan2(rho * (1.0 - WGS84_E2 * n / (n + next_alt)));
        let done = (next_lat - lat).abs() < 1e-15 && (next_alt - alt).abs() < 1e-9;
        lat = next_lat;
        alt = next_alt;
        if done {
            break;
        }
    }
    GeodeticCoord {
        lat: lat.to_degrees(),
        lon: lon.to_degrees(),
        alt,
    }
}

/// Rotation taking ECEF difference vectors into the ENU frame at `origin`.
pub fn enu_rotation(origin: &GeodeticCoord) -> Matrix3<f64> {
    let (slat, clat) = origin.lat.to_radians().sin_cos();
    let (slon, clon) = origin.lon.to_radians().sin_cos();
    Matrix3::new(
        -slon,
        clon,
        0.0,
        -slat * clon,
        -slat * slon,
        clat,
        clat * clon,
        clat * slon,
        slat,
    )
}

pub fn ecef_to_enu(p: &Vector3<f64>, origin: &GeodeticCoord) -> WorldPoint {
    let o = wgs84_to_ecef(origin);
    WorldPoint::from(enu_rotation(origin) * (p - o))
}

pub fn enu_to_ecef(p: &WorldPoint, origin: &GeodeticCoord) -> Vector3<f64> {
    wgs84_to_ecef(origin) + enu_rotation(origin).transpose() * p.vector()
}

pub fn geodetic_to_enu(g: &GeodeticCoord, origin: &GeodeticCoord) -> WorldPoint {
    ecef_to_enu(&wgs84_to_ecef(g), origin)
}

pub fn enu_to_geodetic(p: &WorldPoint, origin: &GeodeticCoord) -> GeodeticCoord {
    ecef_to_wgs84(&enu_to_ecef(p, origin))
}

pub fn world_to_camera(t: &WorldCameraTransform, p: &WorldPoint) -> Vector3<f64> {
    t.apply(&p.vector())
}

pub fn camera_to_world(t: &WorldCameraTransform, pc: &Vector3<f64>) -> WorldPoint {
    WorldPoint::from(t.inverse().apply(pc))
}

pub fn invert_transform(t: &WorldCameraTransform) -> WorldCameraTransform {
    t.inverse()
}

/// Projects a world point to pixels; fails for points at or behind the image plane.
pub fn project(k: &CameraIntrinsics, t: &WorldCameraTransform, p: &WorldPoint) -> Result<PixelCoord> {
    k.project_camera(&world_to_camera(t, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector4;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_rotation(a: f64, b: f64, c: f64) -> Matrix3<f64> {
        *nalgebra::Rotation3::from_euler_angles(a, b, c).matrix()
    }

    #[test]
    fn ecef_reference_values() {
        let p = wgs84_to_ecef(&GeodeticCoord::new(0.0, 0.0, 0.0).unwrap());
        assert_abs_diff_eq!(p.x, 6_378_137.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.z, 0.0, epsilon = 1e-9);

        let p = wgs84_to_ecef(&GeodeticCoord::new(90.0, 0.0, 0.0).unwrap());
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.z, WGS84_B, epsilon = 1e-6);
    }

    #[test]
    fn ecef_matches_textbook_formula() {
        // Frozen from a standalone evaluation of X = (N+h)cos(lat)cos(lon),
        // Y = (N+h)cos(lat)sin(lon), Z = (N(1-e^2)+h)sin(lat).
        let p = wgs84_to_ecef(&GeodeticCoord::new(40.5, -74.45, 30.0).unwrap());
        assert_abs_diff_eq!(p.x, 1_302_022.582_497_181, epsilon = 1e-6);
        assert_abs_diff_eq!(p.y, -4_679_081.732_439_042, epsilon = 1e-6);
        assert_abs_diff_eq!(p.z, 4_120_379.372_677_761_6, epsilon = 1e-6);
    }

    #[test]
    fn enu_axes() {
        let origin = GeodeticCoord::new(40.5, -74.45, 30.0).unwrap();
        let o = wgs84_to_ecef(&origin);
        let e = ecef_to_enu(&o, &origin);
        assert_abs_diff_eq!(e.vector().norm(), 0.0, epsilon = 1e-9);

        let up = GeodeticCoord { alt: 130.0, ..origin };
        let e = geodetic_to_enu(&up, &origin);
        assert_abs_diff_eq!(e.x, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(e.y, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(e.z, 100.0, epsilon = 1e-6);
    }

    #[test]
    fn enu_matches_explicit_rotation() {
        // Independent route: rotate by -lon about z, then by lat about y, and permute.
        let origin = GeodeticCoord::new(-33.9, 151.2, 12.0).unwrap();
        let p = wgs84_to_ecef(&origin) + Vector3::new(120.0, -340.0, 75.0);
        let d = p - wgs84_to_ecef(&origin);
        let (lat, lon) = (origin.lat.to_radians(), origin.lon.to_radians());
        let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), -lon);
        let ry = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), lat);
        let q = ry * rz * d; // x: radial up, y: east, z: north
        let enu = ecef_to_enu(&p, &origin);
        assert_abs_diff_eq!(enu.x, q.y, epsilon = 1e-9);
        assert_abs_diff_eq!(enu.y, q.z, epsilon = 1e-9);
        assert_abs_diff_eq!(enu.z, q.x, epsilon = 1e-9);
    }

    #[test]
    fn transform_basics() {
        let id = WorldCameraTransform::identity();
        let p = WorldPoint::new(1.0, 2.0, 3.0);
        assert_eq!(world_to_camera(&id, &p), Vector3::new(1.0, 2.0, 3.0));
        let t = WorldCameraTransform::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(world_to_camera(&t, &WorldPoint::default()), Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(invert_transform(&id), id);
        let t = WorldCameraTransform::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(invert_transform(&t).translation, Vector3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::default();
        let id = WorldCameraTransform::identity();
        let px = project(&k, &id, &WorldPoint::new(0.0, 0.0, 10.0)).unwrap();
        assert_eq!((px.u, px.v), (640.0, 360.0));
        let px = project(&k, &id, &WorldPoint::new(1.0, 0.0, 10.0)).unwrap();
        assert_abs_diff_eq!(px.u, 710.0, epsilon = 1e-12);
        assert!(matches!(
            project(&k, &id, &WorldPoint::new(0.0, 0.0, -1.0)),
            Err(Error::PointBehindCamera { .. })
        ));
        assert!(project(&k, &id, &WorldPoint::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn looking_from_is_proper_rotation() {
        let t = WorldCameraTransform::looking_from(Vector3::new(0.0, 0.0, 2.6), 30.0, 15.0);
        t.validate().unwrap();
        // A point straight ahead on the optical axis projects to the principal point.
        let (s, c) = 30f64.to_radians().sin_cos();
        let (sp, cp) = 15f64.to_radians().sin_cos();
        let ahead = Vector3::new(0.0, 0.0, 2.6) + 10.0 * Vector3::new(s * cp, c * cp, -sp);
        let pc = t.apply(&ahead);
        assert_abs_diff_eq!(pc.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pc.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pc.z, 10.0, epsilon = 1e-12);
        // World up maps to camera -y (image up).
        let up = t.rotation * Vector3::z();
        assert!(up.y < 0.0);
    }

    proptest! {
        #[test]
        fn enu_round_trip(e in -7000.0..7000.0f64, n in -7000.0..7000.0f64, u in -500.0..500.0f64,
                          lat in -80.0..80.0f64, lon in -179.0..179.0f64) {
            let origin = GeodeticCoord::new(lat, lon, 50.0).unwrap();
            let p = WorldPoint::new(e, n, u);
            let back = ecef_to_enu(&enu_to_ecef(&p, &origin), &origin);
            prop_assert!((back.vector() - p.vector()).norm() < 1e-6);
            let via_geodetic = geodetic_to_enu(&enu_to_geodetic(&p, &origin), &origin);
            prop_assert!((via_geodetic.vector() - p.vector()).norm() < 1e-6);
        }

        #[test]
        fn camera_round_trip(a in -3.1..3.1f64, b in -1.5..1.5f64, c in -3.1..3.1f64,
                             tx in -50.0..50.0f64, ty in -50.0..50.0f64, tz in -50.0..50.0f64,
                             px in -30.0..30.0f64, py in -30.0..30.0f64, pz in -30.0..30.0f64) {
            let t = WorldCameraTransform::new(random_rotation(a, b, c), Vector3::new(tx, ty, tz));
            let p = WorldPoint::new(px, py, pz);
            let back = camera_to_world(&t, &world_to_camera(&t, &p));
            prop_assert!((back.vector() - p.vector()).norm() < 1e-9);
            let inv = t.inverse();
            prop_assert!(inv.orthonormality_error() < 1e-9);
            let twice = inv.inverse();
            prop_assert!((twice.rotation - t.rotation).amax() < 1e-9);
            prop_assert!((twice.translation - t.translation).amax() < 1e-9);
            prop_assert!(world_to_camera(&t, &t.camera_origin_world()).norm() < 1e-9);
            // Homogeneous-coordinates route.
            let h = t.homogeneous() * Vector4::new(px, py, pz, 1.0);
            prop_assert!((h.xyz() - world_to_camera(&t, &p)).norm() < 1e-9);
        }

        #[test]
        fn projection_is_scale_invariant(a in -3.1..3.1f64, b in -1.5..1.5f64, c in -3.1..3.1f64,
                                         px in -5.0..5.0f64, py in -5.0..5.0f64, pz in 1.0..30.0f64,
                                         s in 0.1..10.0f64) {
            let k = CameraIntrinsics::default();
            let r = random_rotation(a, b, c);
            // Put the point in front: choose t so the camera-frame point is (px, py, pz).
            let world = Vector3::new(3.0, -2.0, 1.0);
            let t = WorldCameraTransform::new(r, Vector3::new(px, py, pz) - r * world);
            let pix = project(&k, &t, &WorldPoint::from(world)).unwrap();
            // Explicit homogeneous route with a scaled homogeneous point.
            let mut kt = nalgebra::Matrix3x4::zeros();
            kt.fixed_view_mut::<3, 3>(0, 0).copy_from(&(k.matrix() * t.rotation));
            kt.fixed_view_mut::<3, 1>(0, 3).copy_from(&(k.matrix() * t.translation));
            let h = kt * (Vector4::new(world.x, world.y, world.z, 1.0) * s);
            prop_assert!((h.x / h.z - pix.u).abs() < 1e-9);
            prop_assert!((h.y / h.z - pix.v).abs() < 1e-9);
            // Unproject-then-project round trip.
            let depth = world_to_camera(&t, &WorldPoint::from(world)).z;
            let again = k.project_camera(&k.unproject(&pix, depth)).unwrap();
            prop_assert!(again.distance(&pix) < 1e-9);
        }
    }
}
