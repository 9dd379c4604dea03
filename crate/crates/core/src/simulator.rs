//! Synthetic work-zone scenes: ground-truth motion along lane centerlines
//! and the degraded views of it that individual roadside sensors report.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with the
//! scene seed. Sensor `i` (zero-based, config order) draws from stream
//! `i + 1`, so adding a sensor never perturbs the others. Within a stream
//! the draw order is: one `u32` track id per agent, then for every sample
//! time in order and every agent in config order, a dropout uniform followed
//! by the east and north noise normals. Draws happen whether or not the
//! sample ends up emitted.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{normalize_deg, AeqdProjection, CalibrationConfig, RigidTransform2D};
use crate::model::{
    ClockSource, Frame, GeoPoint, LocalPoint, ObjectClass, Position, SensorDataset, TrackPoint,
    Trajectory, Velocity,
};
use crate::wkt::parse_wkt_linestring;

/// Rate of the emitted ground truth.
pub const GROUND_TRUTH_RATE_HZ: f64 = 10.0;

fn scene_err(msg: impl Into<String>) -> Error {
    Error::SceneConfig(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LineSpec {
    Wkt(String),
    Coordinates(Vec<[f64; 2]>),
}

/// A lane centerline in the scene's AEQD frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneSpec {
    pub lane_id: String,
    pub centerline: LineSpec,
    pub width_m: f64,
}

/// Speed knot, `t` seconds after the agent enters. Speed is linear between
/// knots and constant outside them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedKnot {
    pub t: f64,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: String,
    pub class: ObjectClass,
    pub lane_id: String,
    /// Seconds after the scene start.
    pub entry_time: f64,
    pub speed_profile: Vec<SpeedKnot>,
    /// Signed offset from the centerline, positive to the left of travel.
    #[serde(default)]
    pub lateral_offset_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub sensor_id: String,
    pub origin: GeoPoint,
    /// Compass heading of the field-of-view axis, degrees.
    pub mounting_azimuth: f64,
    pub range: f64,
    /// Full horizontal field of view, degrees.
    pub fov: f64,
    pub rate: f64,
    pub position_noise_sigma: f64,
    pub dropout_prob: f64,
    /// Added to every emitted timestamp.
    pub clock_offset: f64,
    /// Maps the sensor's AEQD frame into its uncalibrated output frame.
    pub extrinsic_error: RigidTransform2D,
    #[serde(default)]
    pub clock_source: ClockSource,
}

impl SensorModel {
    /// Long-range 360 degree lidar: 200 m, 20 Hz, 0.3 m noise.
    pub fn lidar(sensor_id: impl Into<String>, origin: GeoPoint) -> Self {
        Self::preset(sensor_id.into(), origin, 200.0, 360.0, 0.3)
    }

    /// Forward-looking radar-camera: 100 m, 120 degrees, 20 Hz, 1.0 m noise.
    pub fn radar_camera(sensor_id: impl Into<String>, origin: GeoPoint) -> Self {
        Self::preset(sensor_id.into(), origin, 100.0, 120.0, 1.0)
    }

    fn preset(sensor_id: String, origin: GeoPoint, range: f64, fov: f64, sigma: f64) -> Self {
        Self {
            sensor_id,
            origin,
            mounting_azimuth: 0.0,
            range,
            fov,
            rate: 20.0,
            position_noise_sigma: sigma,
            dropout_prob: 0.0,
            clock_offset: 0.0,
            extrinsic_error: RigidTransform2D::identity(),
            clock_source: ClockSource::Ntp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.sensor_id;
        GeoPoint::new(self.origin.lat, self.origin.lon)?;
        let finite = [
            self.mounting_azimuth,
            self.clock_offset,
            self.extrinsic_error.theta,
            self.extrinsic_error.translation.east,
            self.extrinsic_error.translation.north,
            self.extrinsic_error.rotation_center.east,
            self.extrinsic_error.rotation_center.north,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(scene_err(format!("sensor {id}: non-finite parameter")));
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(scene_err(format!("sensor {id}: range must be positive")));
        }
        if !(self.fov > 0.0 && self.fov <= 360.0) {
            return Err(scene_err(format!("sensor {id}: fov must be in (0, 360]")));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(scene_err(format!("sensor {id}: rate must be positive")));
        }
        if !(self.position_noise_sigma >= 0.0 && self.position_noise_sigma.is_finite()) {
            return Err(scene_err(format!("sensor {id}: noise sigma must be >= 0")));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(scene_err(format!(
                "sensor {id}: dropout_prob must be in [0, 1)"
            )));
        }
        Ok(())
    }

    /// Whether `p` (sensor AEQD frame) lies within range and field of view.
    pub fn covers(&self, p: LocalPoint) -> bool {
        if p.norm() > self.range {
            return false;
        }
        if self.fov >= 360.0 {
            return true;
        }
        let bearing = p.east.atan2(p.north).to_degrees();
        normalize_deg(bearing - self.mounting_azimuth).abs() <= self.fov / 2.0
    }

    /// The calibration that undoes this sensor's extrinsic error and clock
    /// offset.
    pub fn expected_calibration(&self) -> CalibrationConfig {
        let mut cfg = CalibrationConfig::from_transform(
            self.sensor_id.clone(),
            self.origin,
            &self.extrinsic_error.inverse(),
        );
        cfg.time_offset_s = self.clock_offset;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    /// Center of the scene's AEQD frame.
    pub origin: GeoPoint,
    /// Epoch seconds of the scene start.
    pub start_time: f64,
    pub duration: f64,
    pub lanes: Vec<LaneSpec>,
    pub agents: Vec<AgentSpec>,
    pub sensors: Vec<SensorModel>,
}

/// Which sensor track observed which agent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackLink {
    pub sensor_id: String,
    pub track_id: String,
    pub agent_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// One trajectory per agent, AEQD around the scene origin, 10 Hz.
    pub ground_truth: Vec<Trajectory>,
    /// Sensor-local observations, in sensor config order.
    pub sensors: Vec<SensorDataset>,
    pub links: Vec<TrackLink>,
}

struct Lane {
    vertices: Vec<LocalPoint>,
    /// Cumulative arc length at each vertex.
    stations: Vec<f64>,
    width: f64,
}

impl Lane {
    fn new(spec: &LaneSpec) -> Result<Self> {
        let vertices = match &spec.centerline {
            LineSpec::Wkt(text) => parse_wkt_linestring(text)?,
            LineSpec::Coordinates(c) => c.iter().map(|&[e, n]| LocalPoint::new(e, n)).collect(),
        };
        let id = &spec.lane_id;
        if vertices.len() < 2 {
            return Err(scene_err(format!(
                "lane {id}: centerline needs two vertices"
            )));
        }
        if vertices
            .iter()
            .any(|p| !(p.east.is_finite() && p.north.is_finite()))
        {
            return Err(scene_err(format!("lane {id}: non-finite vertex")));
        }
        if !(spec.width_m > 0.0 && spec.width_m.is_finite()) {
            return Err(scene_err(format!("lane {id}: width must be positive")));
        }
        let mut stations = vec![0.0];
        for w in vertices.windows(2) {
            let len = w[0].distance(w[1]);
            if len == 0.0 {
                return Err(scene_err(format!("lane {id}: repeated vertex")));
            }
            stations.push(stations.last().unwrap() + len);
        }
        Ok(Self {
            vertices,
            stations,
            width: spec.width_m,
        })
    }

    fn length(&self) -> f64 {
        *self.stations.last().unwrap()
    }

    /// Point at arc length `s` shifted `offset` to the left, and the unit
    /// direction of travel there.
    fn locate(&self, s: f64, offset: f64) -> (LocalPoint, LocalPoint) {
        let seg = self
            .stations
            .partition_point(|&x| x <= s)
            .clamp(1, self.vertices.len() - 1)
            - 1;
        let (a, b) = (self.vertices[seg], self.vertices[seg + 1]);
        let len = self.stations[seg + 1] - self.stations[seg];
        let dir = b.sub(a).scale(1.0 / len);
        let left = LocalPoint::new(-dir.north, dir.east);
        let p = a
            .add(dir.scale(s - self.stations[seg]))
            .add(left.scale(offset));
        (p, dir)
    }
}

struct Agent<'a> {
    spec: &'a AgentSpec,
    lane: &'a Lane,
}

impl Agent<'_> {
    fn speed_at(&self, tau: f64) -> f64 {
        let k = &self.spec.speed_profile;
        if tau <= k[0].t {
            return k[0].speed;
        }
        for w in k.windows(2) {
            if tau <= w[1].t {
                let u = (tau - w[0].t) / (w[1].t - w[0].t);
                return w[0].speed + (w[1].speed - w[0].speed) * u;
            }
        }
        k[k.len() - 1].speed
    }

    /// Distance traveled `tau` seconds after entry: the exact integral of the
    /// piecewise-linear speed.
    fn distance_at(&self, tau: f64) -> f64 {
        let k = &self.spec.speed_profile;
        let mut s = 0.0;
        let mut t = 0.0;
        let mut v = self.speed_at(0.0);
        let breaks = k.iter().map(|x| x.t).filter(|&x| x > 0.0 && x < tau);
        for b in breaks.chain(std::iter::once(tau)) {
            let vb = self.speed_at(b);
            s += 0.5 * (v + vb) * (b - t);
            t = b;
            v = vb;
        }
        s
    }

    /// Position and velocity at scene-relative time `t`, if on the lane.
    fn state(&self, t: f64) -> Option<(LocalPoint, Velocity)> {
        let tau = t - self.spec.entry_time;
        if tau < 0.0 {
            return None;
        }
        let s = self.distance_at(tau);
        if s > self.lane.length() {
            return None;
        }
        let (p, dir) = self.lane.locate(s, self.spec.lateral_offset_m);
        let v = dir.scale(self.speed_at(tau));
        Some((p, Velocity::new(v.east, v.north)))
    }
}

fn build_agents<'a>(
    config: &'a SceneConfig,
    lanes: &'a [(String, Lane)],
) -> Result<Vec<Agent<'a>>> {
    let mut ids = BTreeSet::new();
    config
        .agents
        .iter()
        .map(|spec| {
            let id = &spec.agent_id;
            if !ids.insert(id.as_str()) {
                return Err(scene_err(format!("duplicate agent id {id}")));
            }
            let lane = lanes
                .iter()
                .find(|(lid, _)| *lid == spec.lane_id)
                .map(|(_, l)| l)
                .ok_or_else(|| scene_err(format!("agent {id}: no lane `{}`", spec.lane_id)))?;
            if !spec.lateral_offset_m.is_finite() || spec.lateral_offset_m.abs() > lane.width / 2.0
            {
                return Err(scene_err(format!(
                    "agent {id}: lateral offset {} m leaves lane `{}`",
                    spec.lateral_offset_m, spec.lane_id
                )));
            }
            let k = &spec.speed_profile;
            if k.is_empty() {
                return Err(scene_err(format!("agent {id}: empty speed profile")));
            }
            if k.iter()
                .any(|x| !(x.t.is_finite() && x.speed.is_finite() && x.speed >= 0.0))
            {
                return Err(scene_err(format!(
                    "agent {id}: speeds must be finite and >= 0"
                )));
            }
            if k.windows(2).any(|w| w[1].t <= w[0].t) {
                return Err(scene_err(format!("agent {id}: knot times must increase")));
            }
            if !(spec.entry_time.is_finite() && spec.entry_time >= 0.0) {
                return Err(scene_err(format!("agent {id}: entry_time must be >= 0")));
            }
            Ok(Agent { spec, lane })
        })
        .collect()
}

fn sample_times(duration: f64, rate: f64) -> impl Iterator<Item = f64> {
    let n = (duration * rate + 1e-9).floor() as u64;
    (0..=n).map(move |k| k as f64 / rate)
}

/// Generates ground truth and every sensor's observations.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    GeoPoint::new(config.origin.lat, config.origin.lon)?;
    if !(config.start_time.is_finite() && config.start_time > 0.0) {
        return Err(scene_err("start_time must be positive epoch seconds"));
    }
    if !(config.duration.is_finite() && config.duration > 0.0) {
        return Err(scene_err("duration must be positive"));
    }
    let lanes = config
        .lanes
        .iter()
        .map(|l| Lane::new(l).map(|lane| (l.lane_id.clone(), lane)))
        .collect::<Result<Vec<_>>>()?;
    let agents = build_agents(config, &lanes)?;
    let mut sensor_ids = BTreeSet::new();
    for s in &config.sensors {
        s.validate()?;
        if !sensor_ids.insert(s.sensor_id.as_str()) {
            return Err(scene_err(format!("duplicate sensor id {}", s.sensor_id)));
        }
        if s.clock_offset.abs() >= config.start_time {
            return Err(scene_err(format!(
                "sensor {}: clock offset precedes the epoch",
                s.sensor_id
            )));
        }
    }

    let ground_truth = agents
        .iter()
        .map(|a| {
            let points = sample_times(config.duration, GROUND_TRUTH_RATE_HZ)
                .filter_map(|t| a.state(t).map(|s| (t, s)))
                .map(|(t, (p, v))| {
                    TrackPoint::new(
                        config.start_time + t,
                        Position::Aeqd(p),
                        Some(v),
                        a.spec.class,
                        a.spec.agent_id.clone(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            if points.is_empty() {
                return Err(scene_err(format!(
                    "agent {}: never on its lane during the scene",
                    a.spec.agent_id
                )));
            }
            Trajectory::new(a.spec.agent_id.clone(), Frame::Aeqd, points)
        })
        .collect::<Result<Vec<_>>>()?;

    let scene_proj = AeqdProjection::new(config.origin);
    let mut sensors = Vec::with_capacity(config.sensors.len());
    let mut links = Vec::new();
    for (i, model) in config.sensors.iter().enumerate() {
        let (dataset, sensor_links) = observe(config, &agents, &scene_proj, model, i as u64 + 1)?;
        sensors.push(dataset);
        links.extend(sensor_links);
    }
    Ok(Scene {
        ground_truth,
        sensors,
        links,
    })
}

fn observe(
    config: &SceneConfig,
    agents: &[Agent<'_>],
    scene_proj: &AeqdProjection,
    model: &SensorModel,
    stream: u64,
) -> Result<(SensorDataset, Vec<TrackLink>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let normal =
        Normal::new(0.0, model.position_noise_sigma).map_err(|e| scene_err(e.to_string()))?;
    let sensor_proj = AeqdProjection::new(model.origin);
    let to_sensor = |p: LocalPoint| sensor_proj.forward(scene_proj.inverse(p));

    let mut used = BTreeSet::new();
    let track_ids: Vec<String> = agents
        .iter()
        .map(|_| loop {
            let id = format!("{:08x}", rng.random::<u32>());
            if used.insert(id.clone()) {
                break id;
            }
        })
        .collect();

    let mut tracks: Vec<Vec<TrackPoint>> = vec![Vec::new(); agents.len()];
    for t in sample_times(config.duration, model.rate) {
        for (k, agent) in agents.iter().enumerate() {
            let keep = rng.random::<f64>() >= model.dropout_prob;
            let (ne, nn) = (normal.sample(&mut rng), normal.sample(&mut rng));
            let Some((p, v)) = agent.state(t) else {
                continue;
            };
            let q = to_sensor(p)?;
            if !keep || !model.covers(q) {
                continue;
            }
            // Velocity direction carried through the frame change by a
            // one-meter step along the heading.
            let speed = v.as_point().norm();
            let v_sensor = if speed > 0.0 {
                let ahead = to_sensor(p.add(v.as_point().scale(1.0 / speed)))?;
                ahead.sub(q).scale(speed)
            } else {
                LocalPoint::ORIGIN
            };
            let out = model
                .extrinsic_error
                .apply_point(q)
                .add(LocalPoint::new(ne, nn));
            let vel = model
                .extrinsic_error
                .apply_velocity(Velocity::new(v_sensor.east, v_sensor.north));
            tracks[k].push(TrackPoint::new(
                config.start_time + t + model.clock_offset,
                Position::SensorLocal(out),
                Some(vel),
                agent.spec.class,
                model.sensor_id.clone(),
            )?);
        }
    }

    let mut trajectories = Vec::new();
    let mut links = Vec::new();
    for ((points, id), agent) in tracks.into_iter().zip(track_ids).zip(agents) {
        if points.is_empty() {
            continue;
        }
        links.push(TrackLink {
            sensor_id: model.sensor_id.clone(),
            track_id: id.clone(),
            agent_id: agent.spec.agent_id.clone(),
        });
        trajectories.push(Trajectory::new(id, Frame::SensorLocal, points)?);
    }
    let dataset = SensorDataset::new(
        model.sensor_id.clone(),
        model.origin,
        trajectories,
        model.clock_source,
    )?;
    Ok((dataset, links))
}
