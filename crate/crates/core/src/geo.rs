//! Coordinate machinery: spherical azimuthal-equidistant projection around
//! a sensor origin, and the planar rotation + translation used to calibrate
//! sensor frames.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Frame, GeoPoint, LocalPoint, Position, TrackPoint, Trajectory, Velocity};

/// Mean earth radius used by the spherical projection, in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Row-major 2x2 matrix.
pub type Mat2 = [[f64; 2]; 2];

/// Counter-clockwise rotation by `theta` radians.
pub fn rotation_matrix(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

pub fn mat_vec(m: &Mat2, p: LocalPoint) -> LocalPoint {
    LocalPoint::new(
        m[0][0] * p.east + m[0][1] * p.north,
        m[1][0] * p.east + m[1][1] * p.north,
    )
}

pub fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// CCW angle of a rotation matrix.
pub fn rotation_angle(m: &Mat2) -> f64 {
    m[1][0].atan2(m[0][0])
}

/// Wraps an angle in degrees into (-180, 180].
pub fn normalize_deg(deg: f64) -> f64 {
    let x = deg.rem_euclid(360.0);
    if x > 180.0 {
        x - 360.0
    } else {
        x
    }
}

/// Wraps an angle in radians into (-pi, pi].
pub fn normalize_rad(rad: f64) -> f64 {
    let x = rad.rem_euclid(2.0 * PI);
    if x > PI {
        x - 2.0 * PI
    } else {
        x
    }
}

/// Converts a compass azimuth (degrees clockwise from north) to the
/// counter-clockwise, east-referenced angle in radians, in (-pi, pi].
pub fn azimuth_to_math(azimuth_deg: f64) -> f64 {
    normalize_deg(90.0 - azimuth_deg).to_radians()
}

/// Rotation that turns a sensor frame whose forward axis points north into
/// one whose forward axis points at `azimuth_deg`.
///
/// Equals `azimuth_to_math(azimuth_deg) - azimuth_to_math(0)`, so azimuth 0
/// is the identity.
pub fn heading_rotation(azimuth_deg: f64) -> f64 {
    normalize_rad(azimuth_to_math(azimuth_deg) - azimuth_to_math(0.0))
}

/// Inverse of [`heading_rotation`], in degrees within (-180, 180].
pub fn heading_azimuth_deg(theta: f64) -> f64 {
    normalize_deg(-theta.to_degrees())
}

/// Spherical azimuthal-equidistant projection centered on `center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeqdProjection {
    pub center: GeoPoint,
    pub earth_radius: f64,
    sin_lat0: f64,
    cos_lat0: f64,
}

impl AeqdProjection {
    pub fn new(center: GeoPoint) -> Self {
        let (sin_lat0, cos_lat0) = center.lat.to_radians().sin_cos();
        Self {
            center,
            earth_radius: EARTH_RADIUS_M,
            sin_lat0,
            cos_lat0,
        }
    }

    /// Projects a geodetic point; distance from the origin equals the
    /// great-circle distance to the center and the azimuth is preserved.
    pub fn forward(&self, p: GeoPoint) -> Result<LocalPoint> {
        if p == self.center {
            return Ok(LocalPoint::ORIGIN);
        }
        let (sin_lat, cos_lat) = p.lat.to_radians().sin_cos();
        let dlon = (p.lon - self.center.lon).to_radians();
        let (sin_dlon, cos_dlon) = dlon.sin_cos();

        // Central angle from unit vectors in a frame with the center's
        // meridian at zero longitude: atan2(|u x v|, u . v) stays accurate
        // at short range and near the antipode.
        let u = [self.cos_lat0, 0.0, self.sin_lat0];
        let v = [cos_lat * cos_dlon, cos_lat * sin_dlon, sin_lat];
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let cross_norm = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        let c = cross_norm.atan2(u[0] * v[0] + u[1] * v[1] + u[2] * v[2]);
        if c > PI - 1e-9 {
            return Err(Error::AntipodalPoint);
        }
        let az = (sin_dlon * cos_lat)
            .atan2(self.cos_lat0 * sin_lat - self.sin_lat0 * cos_lat * cos_dlon);
        let rho = self.earth_radius * c;
        Ok(LocalPoint::new(rho * az.sin(), rho * az.cos()))
    }

    /// Exact inverse of [`AeqdProjection::forward`] on the sphere.
    pub fn inverse(&self, p: LocalPoint) -> GeoPoint {
        let rho = p.east.hypot(p.north);
        if rho == 0.0 {
            return self.center;
        }
        let c = rho / self.earth_radius;
        let (sin_c, cos_c) = c.sin_cos();
        let az = p.east.atan2(p.north);
        let (sin_az, cos_az) = az.sin_cos();
        let sin_lat = (self.sin_lat0 * cos_c + self.cos_lat0 * sin_c * cos_az).clamp(-1.0, 1.0);
        let lat = sin_lat.asin();
        let dlon = (sin_az * sin_c * self.cos_lat0).atan2(cos_c - self.sin_lat0 * sin_lat);
        GeoPoint {
            lat: lat.to_degrees(),
            lon: normalize_deg(self.center.lon + dlon.to_degrees()),
        }
    }
}

pub fn aeqd_forward(proj: &AeqdProjection, p: GeoPoint) -> Result<LocalPoint> {
    proj.forward(p)
}

pub fn aeqd_inverse(proj: &AeqdProjection, p: LocalPoint) -> GeoPoint {
    proj.inverse(p)
}

/// Great-circle distance by the haversine formula on the same sphere.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (la, lb) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lb - la;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la.cos() * lb.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().asin()
}

/// Rotation by `theta` about `rotation_center`, then translation:
/// `p' = R(theta) (p - c) + c + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2D {
    /// Counter-clockwise, radians.
    pub theta: f64,
    pub translation: LocalPoint,
    pub rotation_center: LocalPoint,
}

impl Default for RigidTransform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform2D {
    pub fn new(theta: f64, translation: LocalPoint, rotation_center: LocalPoint) -> Self {
        Self {
            theta,
            translation,
            rotation_center,
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, LocalPoint::ORIGIN, LocalPoint::ORIGIN)
    }

    pub fn rotation(&self) -> Mat2 {
        rotation_matrix(self.theta)
    }

    pub fn apply_point(&self, p: LocalPoint) -> LocalPoint {
        let c = self.rotation_center;
        mat_vec(&self.rotation(), p.sub(c))
            .add(c)
            .add(self.translation)
    }

    /// Rotates a velocity; translation does not apply.
    pub fn apply_velocity(&self, v: Velocity) -> Velocity {
        let r = mat_vec(&self.rotation(), v.as_point());
        Velocity::new(r.east, r.north)
    }

    /// The transform undoing this one, rotating about the same center.
    pub fn inverse(&self) -> Self {
        let back = mat_vec(&rotation_matrix(-self.theta), self.translation);
        Self::new(-self.theta, back.scale(-1.0), self.rotation_center)
    }

    /// Equivalent transform with the rotation center moved to the origin.
    pub fn about_origin(&self) -> Self {
        let c = self.rotation_center;
        let t = c.sub(mat_vec(&self.rotation(), c)).add(self.translation);
        Self::new(self.theta, t, LocalPoint::ORIGIN)
    }

    /// Equivalent transform rotating about `center` instead.
    pub fn with_center(&self, center: LocalPoint) -> Self {
        let o = self.about_origin();
        // t_o = c - R c + t_c  =>  t_c = t_o - c + R c
        let t = o
            .translation
            .sub(center)
            .add(mat_vec(&self.rotation(), center));
        Self::new(self.theta, t, center)
    }
}

/// Applies `t` to every point, preserving order.
pub fn apply_rigid(t: &RigidTransform2D, points: &[LocalPoint]) -> Result<Vec<LocalPoint>> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(points.iter().map(|&p| t.apply_point(p)).collect())
}

pub fn centroid(points: &[LocalPoint]) -> Result<LocalPoint> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = points.len() as f64;
    let (se, sn) = points
        .iter()
        .fold((0.0, 0.0), |(se, sn), p| (se + p.east, sn + p.north));
    Ok(LocalPoint::new(se / n, sn / n))
}

/// Rigidly transforms a planar trajectory, tagging the result with `frame`.
pub fn transform_trajectory(
    traj: &Trajectory,
    t: &RigidTransform2D,
    frame: Frame,
) -> Result<Trajectory> {
    let points = traj
        .points()
        .iter()
        .map(|p| {
            let q = t.apply_point(p.planar()?);
            Ok(TrackPoint {
                position: Position::planar_in(frame, q)?,
                velocity: p.velocity.map(|v| t.apply_velocity(v)),
                ..p.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(traj.track_id.clone(), frame, points)
}

/// Projects a WGS84 trajectory into the AEQD frame of `proj`. Planar AEQD
/// input is passed through unchanged.
pub fn project_trajectory(traj: &Trajectory, proj: &AeqdProjection) -> Result<Trajectory> {
    match traj.frame {
        Frame::Aeqd => return Ok(traj.clone()),
        Frame::SensorLocal => {
            return Err(Error::FrameMismatch {
                expected: "wgs84 or aeqd".into(),
                found: Frame::SensorLocal.to_string(),
            })
        }
        Frame::Wgs84 => {}
    }
    let points = traj
        .points()
        .iter()
        .map(|p| {
            let Position::Wgs84(g) = p.position else {
                unreachable!("frame checked by Trajectory")
            };
            Ok(TrackPoint {
                position: Position::Aeqd(proj.forward(g)?),
                ..p.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(traj.track_id.clone(), Frame::Aeqd, points)
}

/// Maps a planar trajectory to WGS84 with the inverse projection of `proj`.
pub fn unproject_trajectory(traj: &Trajectory, proj: &AeqdProjection) -> Result<Trajectory> {
    let points = traj
        .points()
        .iter()
        .map(|p| {
            Ok(TrackPoint {
                position: Position::Wgs84(proj.inverse(p.planar()?)),
                ..p.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(traj.track_id.clone(), Frame::Wgs84, points)
}

/// Per-sensor calibration file.
///
/// `azimuth_deg` is the compass heading of the sensor's forward axis, so the
/// applied rotation is [`heading_rotation`]. Offsets are applied after the
/// rotation. The rotation center defaults to the sensor origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub sensor_id: String,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub azimuth_deg: f64,
    pub offset_north_m: f64,
    pub offset_east_m: f64,
    #[serde(default)]
    pub rotation_center_east_m: f64,
    #[serde(default)]
    pub rotation_center_north_m: f64,
    /// Sensor clock lag behind the reference clock; subtracted from sensor
    /// timestamps.
    #[serde(default)]
    pub time_offset_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_track_id: Option<String>,
}

impl CalibrationConfig {
    pub fn origin(&self) -> Result<GeoPoint> {
        GeoPoint::new(self.origin_lat, self.origin_lon)
    }

    pub fn transform(&self) -> RigidTransform2D {
        RigidTransform2D::new(
            heading_rotation(self.azimuth_deg),
            LocalPoint::new(self.offset_east_m, self.offset_north_m),
            LocalPoint::new(self.rotation_center_east_m, self.rotation_center_north_m),
        )
    }

    pub fn from_transform(
        sensor_id: impl Into<String>,
        origin: GeoPoint,
        t: &RigidTransform2D,
    ) -> Self {
        Self {
            sensor_id: sensor_id.into(),
            origin_lat: origin.lat,
            origin_lon: origin.lon,
            azimuth_deg: heading_azimuth_deg(t.theta),
            offset_north_m: t.translation.north,
            offset_east_m: t.translation.east,
            rotation_center_east_m: t.rotation_center.east,
            rotation_center_north_m: t.rotation_center.north,
            time_offset_s: 0.0,
            matched_track_id: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        cfg.origin()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Maps a raw sensor-frame trajectory to WGS84: rigid transform into the
    /// sensor's AEQD frame, clock correction, then inverse projection.
    pub fn calibrate_trajectory(&self, traj: &Trajectory) -> Result<Trajectory> {
        let aeqd = transform_trajectory(traj, &self.transform(), Frame::Aeqd)?;
        let shifted = aeqd.time_shifted(-self.time_offset_s);
        unproject_trajectory(&shifted, &AeqdProjection::new(self.origin()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const QUARTER: f64 = PI / 2.0;

    fn close(a: LocalPoint, b: LocalPoint, tol: f64) -> bool {
        a.distance(b) <= tol
    }

    #[test]
    fn forward_center_is_origin() {
        let proj = AeqdProjection::new(GeoPoint::new(40.75, -96.68).unwrap());
        assert_eq!(proj.forward(proj.center).unwrap(), LocalPoint::ORIGIN);
        assert_eq!(proj.inverse(LocalPoint::ORIGIN), proj.center);
    }

    #[test]
    fn one_degree_north_of_null_island() {
        // Meridian arc R * (1 deg in radians), R = 6371008.8 m, computed
        // independently (python: 6371008.8 * pi / 180).
        let expected = 111_195.080_233_532_92;
        let proj = AeqdProjection::new(GeoPoint::new(0.0, 0.0).unwrap());
        let p = proj.forward(GeoPoint::new(1.0, 0.0).unwrap()).unwrap();
        assert!(p.east.abs() < 1e-9);
        assert!((p.north - expected).abs() < 0.01, "{p:?}");
        let g = proj.inverse(LocalPoint::new(0.0, expected));
        assert!((g.lat - 1.0).abs() < 1e-8 && g.lon.abs() < 1e-8, "{g:?}");
    }

    #[test]
    fn antipode_is_singular() {
        let proj = AeqdProjection::new(GeoPoint::new(10.0, 20.0).unwrap());
        assert!(matches!(
            proj.forward(GeoPoint::new(-10.0, -160.0).unwrap()),
            Err(Error::AntipodalPoint)
        ));
    }

    #[test]
    fn quarter_turn_about_origin() {
        let t = RigidTransform2D::new(QUARTER, LocalPoint::ORIGIN, LocalPoint::ORIGIN);
        let out =
            apply_rigid(&t, &[LocalPoint::new(1.0, 0.0), LocalPoint::new(-1.0, 0.0)]).unwrap();
        assert!(close(out[0], LocalPoint::new(0.0, 1.0), 1e-15));
        assert!(close(out[1], LocalPoint::new(0.0, -1.0), 1e-15));
    }

    #[test]
    fn identity_and_self_rotation() {
        let pts = [LocalPoint::new(3.0, -7.5), LocalPoint::new(0.25, 1.0)];
        assert_eq!(
            apply_rigid(&RigidTransform2D::identity(), &pts).unwrap(),
            pts.to_vec()
        );
        let p = LocalPoint::new(12.0, -4.0);
        let t = RigidTransform2D::new(1.234, LocalPoint::new(3.0, 4.0), p);
        let out = apply_rigid(&t, &[p]).unwrap();
        assert!(close(out[0], LocalPoint::new(15.0, 0.0), 1e-12));
        assert!(matches!(apply_rigid(&t, &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn rotation_matrix_is_proper() {
        for k in 0..100 {
            let m = rotation_matrix(k as f64 * 0.173 - 8.0);
            assert!((det2(&m) - 1.0).abs() < 1e-12);
            let mtm00 = m[0][0] * m[0][0] + m[1][0] * m[1][0];
            let mtm01 = m[0][0] * m[0][1] + m[1][0] * m[1][1];
            assert!((mtm00 - 1.0).abs() < 1e-12 && mtm01.abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(
            centroid(&[LocalPoint::new(0.0, 0.0), LocalPoint::new(2.0, 0.0)]).unwrap(),
            LocalPoint::new(1.0, 0.0)
        );
        assert_eq!(
            centroid(&[LocalPoint::new(5.0, 5.0)]).unwrap(),
            LocalPoint::new(5.0, 5.0)
        );
        assert!(centroid(&[]).is_err());
    }

    #[test]
    fn azimuth_conversion() {
        assert!((azimuth_to_math(0.0) - QUARTER).abs() < 1e-15);
        assert!(azimuth_to_math(90.0).abs() < 1e-15);
        // 90 - 185 = -95 degrees
        assert!((azimuth_to_math(185.0) - (-95.0f64).to_radians()).abs() < 1e-15);
        assert!((azimuth_to_math(185.0) - -1.65806).abs() < 1e-5);
        assert!((azimuth_to_math(270.0) - PI).abs() < 1e-15);
        assert_eq!(heading_rotation(0.0), 0.0);
        assert!((heading_azimuth_deg(heading_rotation(185.0)) - -175.0).abs() < 1e-12);
    }

    #[test]
    fn config_transform_roundtrip() {
        let origin = GeoPoint::new(40.0, -96.0).unwrap();
        let t = RigidTransform2D::new(
            -1.2,
            LocalPoint::new(28.0, -92.0),
            LocalPoint::new(5.0, 6.0),
        );
        let cfg = CalibrationConfig::from_transform("lidar", origin, &t);
        let back = cfg.transform();
        let p = LocalPoint::new(-40.0, 17.0);
        assert!(close(back.apply_point(p), t.apply_point(p), 1e-9));
    }

    #[test]
    fn recentering_preserves_mapping() {
        let t = RigidTransform2D::new(0.7, LocalPoint::new(1.0, -2.0), LocalPoint::new(30.0, 40.0));
        let moved = t.with_center(LocalPoint::new(-5.0, 2.5));
        let o = t.about_origin();
        for p in [LocalPoint::new(0.0, 0.0), LocalPoint::new(100.0, -3.0)] {
            assert!(close(moved.apply_point(p), t.apply_point(p), 1e-9));
            assert!(close(o.apply_point(p), t.apply_point(p), 1e-9));
        }
    }

    fn cloud() -> impl Strategy<Value = Vec<LocalPoint>> {
        proptest::collection::vec((-500.0f64..500.0, -500.0f64..500.0), 2..40)
            .prop_map(|v| v.into_iter().map(|(e, n)| LocalPoint::new(e, n)).collect())
    }

    proptest! {
        #[test]
        fn preserves_pairwise_distances(pts in cloud(), theta in -7.0f64..7.0, dx in -1e3f64..1e3, dy in -1e3f64..1e3) {
            let c = centroid(&pts).unwrap();
            let t = RigidTransform2D::new(theta, LocalPoint::new(dx, dy), c);
            let out = apply_rigid(&t, &pts).unwrap();
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    let d0 = pts[i].distance(pts[j]);
                    let d1 = out[i].distance(out[j]);
                    prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1.0));
                }
            }
        }

        #[test]
        fn rotate_back_is_identity(pts in cloud(), theta in -7.0f64..7.0) {
            let c = centroid(&pts).unwrap();
            let fwd = RigidTransform2D::new(theta, LocalPoint::ORIGIN, c);
            let back = RigidTransform2D::new(-theta, LocalPoint::ORIGIN, c);
            let out = apply_rigid(&back, &apply_rigid(&fwd, &pts).unwrap()).unwrap();
            for (a, b) in pts.iter().zip(&out) {
                prop_assert!(a.distance(*b) < 1e-9);
            }
        }

        #[test]
        fn centroid_matches_direct_sum(pts in proptest::collection::vec((-1e4f64..1e4, -1e4f64..1e4), 1..1000)) {
            let pts: Vec<LocalPoint> = pts.into_iter().map(|(e, n)| LocalPoint::new(e, n)).collect();
            let c = centroid(&pts).unwrap();
            let n = pts.len() as f64;
            let se: f64 = pts.iter().map(|p| p.east).sum();
            let sn: f64 = pts.iter().map(|p| p.north).sum();
            prop_assert!((c.east - se / n).abs() < 1e-12 * (1.0 + se.abs() / n));
            prop_assert!((c.north - sn / n).abs() < 1e-12 * (1.0 + sn.abs() / n));
        }

        #[test]
        fn distance_from_center_is_great_circle(de in -10_000.0f64..10_000.0, dn in -10_000.0f64..10_000.0) {
            let proj = AeqdProjection::new(GeoPoint::new(40.75, -96.68).unwrap());
            let g = proj.inverse(LocalPoint::new(de, dn));
            let p = proj.forward(g).unwrap();
            prop_assert!(p.distance(LocalPoint::new(de, dn)) < 1e-6);
            let d = haversine_distance(proj.center, g);
            if d > 1.0 {
                prop_assert!((p.norm() - d).abs() <= 1e-6 * d);
            }
        }
    }
}
