//! Shared domain types: points, frames, track points, trajectories and
//! per-sensor datasets.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A WGS84 geodetic position in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(lat.is_finite() && (-90.0..=90.0).contains(&lat)) {
            return Err(Error::InvalidValue(format!(
                "latitude {lat} outside [-90, 90]"
            )));
        }
        if !(lon.is_finite() && (-180.0..=180.0).contains(&lon)) {
            return Err(Error::InvalidValue(format!(
                "longitude {lon} outside [-180, 180]"
            )));
        }
        Ok(Self { lat, lon })
    }
}

/// A point in a planar east/north frame, in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalPoint {
    pub east: f64,
    pub north: f64,
}

impl LocalPoint {
    pub const ORIGIN: LocalPoint = LocalPoint {
        east: 0.0,
        north: 0.0,
    };

    /// Unchecked constructor; use [`LocalPoint::try_new`] for untrusted input.
    pub const fn new(east: f64, north: f64) -> Self {
        Self { east, north }
    }

    pub fn try_new(east: f64, north: f64) -> Result<Self> {
        if !(east.is_finite() && north.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite planar coordinate ({east}, {north})"
            )));
        }
        Ok(Self { east, north })
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: LocalPoint) -> LocalPoint {
        LocalPoint::new(self.east - other.east, self.north - other.north)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: LocalPoint) -> LocalPoint {
        LocalPoint::new(self.east + other.east, self.north + other.north)
    }

    pub fn scale(self, k: f64) -> LocalPoint {
        LocalPoint::new(self.east * k, self.north * k)
    }

    pub fn dot(self, other: LocalPoint) -> f64 {
        self.east * other.east + self.north * other.north
    }

    pub fn norm(self) -> f64 {
        self.east.hypot(self.north)
    }

    pub fn distance(self, other: LocalPoint) -> f64 {
        self.sub(other).norm()
    }

    pub fn lerp(self, other: LocalPoint, w: f64) -> LocalPoint {
        LocalPoint::new(
            self.east + (other.east - self.east) * w,
            self.north + (other.north - self.north) * w,
        )
    }
}

/// Planar velocity in meters per second.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub east: f64,
    pub north: f64,
}

impl Velocity {
    pub const fn new(east: f64, north: f64) -> Self {
        Self { east, north }
    }

    pub fn as_point(self) -> LocalPoint {
        LocalPoint::new(self.east, self.north)
    }
}

/// Coordinate frame a position is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Raw, uncalibrated sensor coordinates.
    SensorLocal,
    /// Azimuthal-equidistant east/north around some origin.
    Aeqd,
    Wgs84,
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Frame::SensorLocal => "sensor_local",
            Frame::Aeqd => "aeqd",
            Frame::Wgs84 => "wgs84",
        })
    }
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    PassengerVehicle,
    CommercialMotorVehicle,
    ConstructionVehicle,
    Pedestrian,
    Worker,
    #[default]
    Unknown,
}

impl ObjectClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::PassengerVehicle => "passenger_vehicle",
            ObjectClass::CommercialMotorVehicle => "commercial_motor_vehicle",
            ObjectClass::ConstructionVehicle => "construction_vehicle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Worker => "worker",
            ObjectClass::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "passenger_vehicle" => ObjectClass::PassengerVehicle,
            "commercial_motor_vehicle" => ObjectClass::CommercialMotorVehicle,
            "construction_vehicle" => ObjectClass::ConstructionVehicle,
            "pedestrian" => ObjectClass::Pedestrian,
            "worker" => ObjectClass::Worker,
            "unknown" => ObjectClass::Unknown,
            _ => return None,
        })
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A position tagged with the frame it lives in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Position {
    SensorLocal(LocalPoint),
    Aeqd(LocalPoint),
    Wgs84(GeoPoint),
}

impl Position {
    pub fn frame(&self) -> Frame {
        match self {
            Position::SensorLocal(_) => Frame::SensorLocal,
            Position::Aeqd(_) => Frame::Aeqd,
            Position::Wgs84(_) => Frame::Wgs84,
        }
    }

    /// Planar coordinates, or `None` for geodetic positions.
    pub fn planar(&self) -> Option<LocalPoint> {
        match *self {
            Position::SensorLocal(p) | Position::Aeqd(p) => Some(p),
            Position::Wgs84(_) => None,
        }
    }

    pub fn planar_in(frame: Frame, p: LocalPoint) -> Result<Position> {
        match frame {
            Frame::SensorLocal => Ok(Position::SensorLocal(p)),
            Frame::Aeqd => Ok(Position::Aeqd(p)),
            Frame::Wgs84 => Err(Error::FrameMismatch {
                expected: "planar frame".into(),
                found: Frame::Wgs84.to_string(),
            }),
        }
    }

    fn lerp(&self, other: &Position, w: f64) -> Position {
        match (*self, *other) {
            (Position::SensorLocal(a), Position::SensorLocal(b)) => {
                Position::SensorLocal(a.lerp(b, w))
            }
            (Position::Aeqd(a), Position::Aeqd(b)) => Position::Aeqd(a.lerp(b, w)),
            (Position::Wgs84(a), Position::Wgs84(b)) => Position::Wgs84(GeoPoint {
                lat: a.lat + (b.lat - a.lat) * w,
                lon: a.lon + (b.lon - a.lon) * w,
            }),
            // Trajectory construction rejects mixed frames.
            _ => unreachable!("interpolation across frames"),
        }
    }
}

/// One timestamped observation of an object.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackPoint {
    /// Seconds since the epoch.
    pub timestamp: f64,
    pub position: Position,
    pub velocity: Option<Velocity>,
    pub object_class: ObjectClass,
    pub source: String,
}

impl TrackPoint {
    pub fn new(
        timestamp: f64,
        position: Position,
        velocity: Option<Velocity>,
        object_class: ObjectClass,
        source: impl Into<String>,
    ) -> Result<Self> {
        if !(timestamp.is_finite() && timestamp > 0.0) {
            return Err(Error::InvalidValue(format!(
                "timestamp {timestamp} must be finite and strictly positive"
            )));
        }
        if let Some(v) = velocity {
            if !(v.east.is_finite() && v.north.is_finite()) {
                return Err(Error::InvalidValue("non-finite velocity".into()));
            }
        }
        match position {
            Position::Wgs84(g) => {
                GeoPoint::new(g.lat, g.lon)?;
            }
            Position::SensorLocal(p) | Position::Aeqd(p) => {
                LocalPoint::try_new(p.east, p.north)?;
            }
        }
        Ok(Self {
            timestamp,
            position,
            velocity,
            object_class,
            source: source.into(),
        })
    }

    /// Planar position, failing for geodetic points.
    pub fn planar(&self) -> Result<LocalPoint> {
        self.position.planar().ok_or_else(|| Error::FrameMismatch {
            expected: "planar frame".into(),
            found: self.position.frame().to_string(),
        })
    }
}

/// A point obtained by sampling a trajectory at an arbitrary time.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub point: TrackPoint,
    /// Width of the bracketing sample interval; zero on an exact hit.
    pub gap: f64,
    /// Distance in time to the nearer bracketing sample.
    pub nearest_dt: f64,
}

/// The time-ordered observations of one persistent track.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub track_id: String,
    pub frame: Frame,
    points: Vec<TrackPoint>,
}

impl Trajectory {
    /// Builds a trajectory from points already in strictly ascending time order.
    pub fn new(track_id: impl Into<String>, frame: Frame, points: Vec<TrackPoint>) -> Result<Self> {
        let track_id = track_id.into();
        for w in points.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::InvalidTrajectory(format!(
                    "track {track_id}: timestamps not strictly ascending at {}",
                    w[1].timestamp
                )));
            }
        }
        if let Some(p) = points.iter().find(|p| p.position.frame() != frame) {
            return Err(Error::FrameMismatch {
                expected: frame.to_string(),
                found: p.position.frame().to_string(),
            });
        }
        Ok(Self {
            track_id,
            frame,
            points,
        })
    }

    /// Sorts the points by time first; duplicate timestamps are rejected.
    pub fn from_unsorted(
        track_id: impl Into<String>,
        frame: Frame,
        mut points: Vec<TrackPoint>,
    ) -> Result<Self> {
        points.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Self::new(track_id, frame, points)
    }

    pub fn points(&self) -> &[TrackPoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<TrackPoint> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start_time(&self) -> Option<f64> {
        self.points.first().map(|p| p.timestamp)
    }

    pub fn end_time(&self) -> Option<f64> {
        self.points.last().map(|p| p.timestamp)
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.timestamp).collect()
    }

    /// Planar positions; fails for geodetic trajectories.
    pub fn planar_points(&self) -> Result<Vec<LocalPoint>> {
        self.points.iter().map(TrackPoint::planar).collect()
    }

    /// Most frequent class over the points (ties go to the earliest seen).
    pub fn dominant_class(&self) -> ObjectClass {
        let mut counts: Vec<(ObjectClass, usize)> = Vec::new();
        for p in &self.points {
            match counts.iter_mut().find(|(c, _)| *c == p.object_class) {
                Some((_, n)) => *n += 1,
                None => counts.push((p.object_class, 1)),
            }
        }
        let mut best: Option<(ObjectClass, usize)> = None;
        for (c, n) in counts {
            if best.is_none_or(|(_, bn)| n > bn) {
                best = Some((c, n));
            }
        }
        best.map(|(c, _)| c).unwrap_or_default()
    }

    /// Same trajectory with every timestamp shifted by `dt`.
    pub fn time_shifted(&self, dt: f64) -> Trajectory {
        let points = self
            .points
            .iter()
            .map(|p| TrackPoint {
                timestamp: p.timestamp + dt,
                ..p.clone()
            })
            .collect();
        Trajectory {
            track_id: self.track_id.clone(),
            frame: self.frame,
            points,
        }
    }

    /// Linear interpolation at `t`; `None` outside the time span.
    pub fn sample_at(&self, t: f64) -> Option<Sample> {
        let pts = &self.points;
        let first = pts.first()?;
        let last = pts.last()?;
        if t < first.timestamp || t > last.timestamp {
            return None;
        }
        let idx = pts.partition_point(|p| p.timestamp < t);
        let hi = &pts[idx];
        if hi.timestamp == t {
            return Some(Sample {
                point: hi.clone(),
                gap: 0.0,
                nearest_dt: 0.0,
            });
        }
        let lo = &pts[idx - 1];
        let span = hi.timestamp - lo.timestamp;
        let w = (t - lo.timestamp) / span;
        let velocity = match (lo.velocity, hi.velocity) {
            (Some(a), Some(b)) => Some(Velocity::new(
                a.east + (b.east - a.east) * w,
                a.north + (b.north - a.north) * w,
            )),
            _ => None,
        };
        Some(Sample {
            point: TrackPoint {
                timestamp: t,
                position: lo.position.lerp(&hi.position, w),
                velocity,
                object_class: lo.object_class,
                source: lo.source.clone(),
            },
            gap: span,
            nearest_dt: (t - lo.timestamp).min(hi.timestamp - t),
        })
    }
}

/// Resamples `traj` at `timestamps` by linear interpolation, dropping
/// requested times outside the trajectory's span.
pub fn resample_trajectory(traj: &Trajectory, timestamps: &[f64]) -> Result<Trajectory> {
    if traj.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            found: traj.len(),
        });
    }
    if timestamps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidValue(
            "requested timestamps must be sorted".into(),
        ));
    }
    let mut points: Vec<TrackPoint> = Vec::with_capacity(timestamps.len());
    for &t in timestamps {
        if points.last().is_some_and(|p| p.timestamp == t) {
            continue;
        }
        if let Some(s) = traj.sample_at(t) {
            points.push(s.point);
        }
    }
    Trajectory::new(traj.track_id.clone(), traj.frame, points)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockSource {
    Gnss,
    #[default]
    Ntp,
}

/// All trajectories reported by one sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorDataset {
    pub sensor_id: String,
    pub sensor_origin: GeoPoint,
    pub trajectories: BTreeMap<String, Trajectory>,
    pub clock_source: ClockSource,
}

impl SensorDataset {
    pub fn new(
        sensor_id: impl Into<String>,
        sensor_origin: GeoPoint,
        trajectories: impl IntoIterator<Item = Trajectory>,
        clock_source: ClockSource,
    ) -> Result<Self> {
        let sensor_id = sensor_id.into();
        let mut map = BTreeMap::new();
        for t in trajectories {
            if t.is_empty() {
                return Err(Error::InvalidTrajectory(format!(
                    "sensor {sensor_id}: trajectory {} is empty",
                    t.track_id
                )));
            }
            map.insert(t.track_id.clone(), t);
        }
        Ok(Self {
            sensor_id,
            sensor_origin,
            trajectories: map,
            clock_source,
        })
    }

    pub fn point_count(&self) -> usize {
        self.trajectories.values().map(Trajectory::len).sum()
    }
}
