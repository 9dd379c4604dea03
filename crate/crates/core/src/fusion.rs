//! Multi-sensor track fusion with a planar constant-velocity Kalman filter.
//!
//! State is `[east, north, v_east, v_north]` in the common AEQD frame.
//! Process noise is the continuous white-acceleration model; every
//! predict and update ends by symmetrizing the covariance and confirming it
//! is positive definite with a Cholesky factorization.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix4, SMatrix, SVector, Vector2, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Frame, LocalPoint, Position, SensorDataset, TrackPoint, Trajectory, Velocity};

/// Standard deviation given to an unknown initial velocity, m/s.
pub const INIT_SPEED_SIGMA: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct KfState {
    pub mean: Vector4<f64>,
    pub covariance: Matrix4<f64>,
    pub timestamp: f64,
}

impl KfState {
    pub fn new(mean: Vector4<f64>, covariance: Matrix4<f64>, timestamp: f64) -> Result<Self> {
        if (covariance - covariance.transpose()).abs().max() > 1e-9 * (1.0 + covariance.abs().max())
        {
            return Err(Error::NotPositiveDefinite);
        }
        let s = Self {
            mean,
            covariance,
            timestamp,
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.covariance.cholesky().is_none() || !self.mean.iter().all(|v| v.is_finite()) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(())
    }

    pub fn position(&self) -> LocalPoint {
        LocalPoint::new(self.mean[0], self.mean[1])
    }

    pub fn velocity(&self) -> Velocity {
        Velocity::new(self.mean[2], self.mean[3])
    }

    /// RMS of the east and north position standard deviations, meters.
    pub fn position_sigma(&self) -> f64 {
        ((self.covariance[(0, 0)] + self.covariance[(1, 1)]) / 2.0).sqrt()
    }
}

fn symmetrize(p: Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

/// Measurement noise of one sensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    pub position_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_sigma: Option<f64>,
}

impl SensorNoise {
    pub const LIDAR: SensorNoise = SensorNoise {
        position_sigma: 0.3,
        velocity_sigma: None,
    };
    pub const RADAR_CAMERA: SensorNoise = SensorNoise {
        position_sigma: 1.0,
        velocity_sigma: None,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Spectral density of the white-acceleration process noise, m/s^2.
    pub process_accel_sigma: f64,
    /// Used for sensors absent from `sensors`.
    pub default_sensor: SensorNoise,
    #[serde(default)]
    pub sensors: BTreeMap<String, SensorNoise>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            process_accel_sigma: 2.0,
            default_sensor: SensorNoise::RADAR_CAMERA,
            sensors: BTreeMap::new(),
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidValue(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("process_accel_sigma", self.process_accel_sigma)?;
        for (id, s) in std::iter::once(("default", &self.default_sensor))
            .chain(self.sensors.iter().map(|(k, v)| (k.as_str(), v)))
        {
            positive(&format!("{id}.position_sigma"), s.position_sigma)?;
            if let Some(v) = s.velocity_sigma {
                positive(&format!("{id}.velocity_sigma"), v)?;
            }
        }
        Ok(())
    }

    pub fn sensor(&self, sensor_id: &str) -> SensorNoise {
        self.sensors
            .get(sensor_id)
            .copied()
            .unwrap_or(self.default_sensor)
    }
}

/// Process noise accumulated over `dt` for acceleration density `q`.
fn process_noise(dt: f64, q: f64) -> Matrix4<f64> {
    let (d2, d3) = (dt * dt / 2.0 * q, dt * dt * dt / 3.0 * q);
    let d1 = dt * q;
    Matrix4::new(
        d3, 0.0, d2, 0.0, //
        0.0, d3, 0.0, d2, //
        d2, 0.0, d1, 0.0, //
        0.0, d2, 0.0, d1,
    )
}

/// Constant-velocity prediction to `to_time`.
pub fn kf_predict(state: &KfState, to_time: f64, noise: &NoiseConfig) -> Result<KfState> {
    let dt = to_time - state.timestamp;
    if dt < 0.0 {
        return Err(Error::TimeReversal {
            from: state.timestamp,
            to: to_time,
        });
    }
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let f = Matrix4::new(
        1.0, 0.0, dt, 0.0, //
        0.0, 1.0, 0.0, dt, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    );
    let q = noise.process_accel_sigma.powi(2);
    let out = KfState {
        mean: f * state.mean,
        covariance: symmetrize(f * state.covariance * f.transpose() + process_noise(dt, q)),
        timestamp: to_time,
    };
    out.check()?;
    Ok(out)
}

fn update_linear<const M: usize>(
    state: &KfState,
    z: SVector<f64, M>,
    h: SMatrix<f64, M, 4>,
    r: SMatrix<f64, M, M>,
) -> Result<KfState> {
    let p = state.covariance;
    let s = h * p * h.transpose() + r;
    let chol = s.cholesky().ok_or(Error::NotPositiveDefinite)?;
    // K = P H^T S^-1, solved as S K^T = H P.
    let k = chol.solve(&(h * p)).transpose();
    let innovation = z - h * state.mean;
    let i_kh = Matrix4::identity() - k * h;
    let out = KfState {
        mean: state.mean + k * innovation,
        covariance: symmetrize(i_kh * p * i_kh.transpose() + k * r * k.transpose()),
        timestamp: state.timestamp,
    };
    out.check()?;
    Ok(out)
}

fn measured_position(m: &TrackPoint) -> Result<LocalPoint> {
    match m.position {
        Position::Aeqd(p) => Ok(p),
        ref other => Err(Error::FrameMismatch {
            expected: Frame::Aeqd.to_string(),
            found: other.frame().to_string(),
        }),
    }
}

/// Measurement update with explicit sensor noise. The velocity components
/// are used only when both the measurement and `sensor` carry them.
pub fn kf_update_with(
    state: &KfState,
    measurement: &TrackPoint,
    sensor: &SensorNoise,
) -> Result<KfState> {
    if (measurement.timestamp - state.timestamp).abs() > 1e-9 {
        return Err(Error::InvalidValue(format!(
            "measurement at {} does not match state time {}; predict first",
            measurement.timestamp, state.timestamp
        )));
    }
    let p = measured_position(measurement)?;
    let rp = sensor.position_sigma.powi(2);
    match (measurement.velocity, sensor.velocity_sigma) {
        (Some(v), Some(vs)) => {
            let rv = vs * vs;
            update_linear(
                state,
                Vector4::new(p.east, p.north, v.east, v.north),
                Matrix4::identity(),
                Matrix4::from_diagonal(&Vector4::new(rp, rp, rv, rv)),
            )
        }
        _ => {
            let h = SMatrix::<f64, 2, 4>::new(
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0,
            );
            update_linear(
                state,
                Vector2::new(p.east, p.north),
                h,
                Matrix2::from_diagonal_element(rp),
            )
        }
    }
}

/// Measurement update using the noise of the measurement's source sensor.
pub fn kf_update(
    state: &KfState,
    measurement: &TrackPoint,
    noise: &NoiseConfig,
) -> Result<KfState> {
    kf_update_with(state, measurement, &noise.sensor(&measurement.source))
}

/// Trajectories from different sensors judged to be one physical object.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackGroup {
    /// `(sensor_id, trajectory)`, at most one per sensor.
    pub members: Vec<(String, Trajectory)>,
}

impl TrackGroup {
    pub fn single(sensor_id: impl Into<String>, trajectory: Trajectory) -> Self {
        Self {
            members: vec![(sensor_id.into(), trajectory)],
        }
    }
}

/// Minimum number of shared timestamps before two tracks may be grouped.
pub const MIN_SHARED_SAMPLES: usize = 3;

/// Mean distance between `x` and `y` over `x`'s timestamps at which `y` has
/// a sample within `gate_dt`; `None` below [`MIN_SHARED_SAMPLES`].
fn mean_separation(x: &Trajectory, y: &Trajectory, gate_dt: f64) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in x.points() {
        let Some(s) = y.sample_at(p.timestamp) else {
            continue;
        };
        if s.nearest_dt > gate_dt {
            continue;
        }
        let (Ok(a), Ok(b)) = (p.planar(), s.point.planar()) else {
            continue;
        };
        sum += a.distance(b);
        n += 1;
    }
    (n >= MIN_SHARED_SAMPLES).then(|| sum / n as f64)
}

/// Greedy gated association across sensors.
///
/// Sensors are visited in sensor-id order and each sensor's tracks by start
/// time. A track joins the existing group, lacking a member from its
/// sensor, with the smallest mean separation over all overlapping members,
/// provided every overlapping member is within `gate_distance`. Otherwise it
/// starts a new group.
pub fn associate_tracks(
    datasets: &[SensorDataset],
    gate_distance: f64,
    gate_dt: f64,
) -> Result<Vec<TrackGroup>> {
    let mut order: Vec<&SensorDataset> = datasets.iter().collect();
    order.sort_by(|a, b| a.sensor_id.cmp(&b.sensor_id));
    let mut groups: Vec<TrackGroup> = Vec::new();
    for ds in order {
        let mut tracks: Vec<&Trajectory> = ds.trajectories.values().collect();
        for t in &tracks {
            if t.frame != Frame::Aeqd {
                return Err(Error::FrameMismatch {
                    expected: format!("{} for association", Frame::Aeqd),
                    found: format!("{} in {}/{}", t.frame, ds.sensor_id, t.track_id),
                });
            }
        }
        tracks.sort_by(|a, b| {
            a.start_time()
                .unwrap_or(0.0)
                .total_cmp(&b.start_time().unwrap_or(0.0))
                .then_with(|| a.track_id.cmp(&b.track_id))
        });
        let existing = groups.len();
        for t in tracks {
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in groups[..existing].iter().enumerate() {
                if g.members.iter().any(|(sid, _)| *sid == ds.sensor_id) {
                    continue;
                }
                let seps: Vec<f64> = g
                    .members
                    .iter()
                    .filter_map(|(_, m)| mean_separation(t, m, gate_dt))
                    .collect();
                if seps.is_empty() || seps.iter().any(|&d| d >= gate_distance) {
                    continue;
                }
                let score = seps.iter().sum::<f64>() / seps.len() as f64;
                if best.is_none_or(|(b, _)| score < b) {
                    best = Some((score, gi));
                }
            }
            match best {
                Some((_, gi)) => groups[gi].members.push((ds.sensor_id.clone(), t.clone())),
                None => groups.push(TrackGroup::single(ds.sensor_id.clone(), t.clone())),
            }
        }
    }
    Ok(groups)
}

/// Identifies one measurement: `(sensor_id, track_id)`.
pub type Contributor = (String, String);

/// An interval during which one sensor stopped reporting a fused object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceGap {
    pub sensor_id: String,
    pub track_id: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedTrack {
    pub fused_id: String,
    pub states: Vec<KfState>,
    /// Measurements absorbed in `(t - 1/rate, t]` for each state.
    pub contributors: Vec<Vec<Contributor>>,
    /// Spans between measurements that contain prediction-only states.
    pub gaps: Vec<(f64, f64)>,
    /// Silences longer than three sampling intervals of individual members.
    pub source_gaps: Vec<SourceGap>,
    /// Spans with no states because the track was closed and later restarted.
    pub outages: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionOptions {
    pub output_rate_hz: f64,
    /// A track closes after this long without a measurement, seconds.
    pub track_timeout_s: f64,
    /// Maximum spacing of the two points used for first-difference velocity.
    pub init_max_dt: f64,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            output_rate_hz: 10.0,
            track_timeout_s: 3.0,
            init_max_dt: 1.0,
        }
    }
}

struct Measurement<'a> {
    sensor_id: &'a str,
    track_id: &'a str,
    point: &'a TrackPoint,
    noise: SensorNoise,
}

impl Measurement<'_> {
    fn contributor(&self) -> Contributor {
        (self.sensor_id.to_string(), self.track_id.to_string())
    }
}

/// Initial state from the first measurement; velocity is the first
/// difference to `second` when given, zero with [`INIT_SPEED_SIGMA`]
/// otherwise.
fn initial_state(first: &Measurement, second: Option<&Measurement>) -> Result<KfState> {
    let z1 = measured_position(first.point)?;
    let s1 = first.noise.position_sigma.powi(2);
    let t = first.point.timestamp;
    let Some(second) = second else {
        let vv = INIT_SPEED_SIGMA * INIT_SPEED_SIGMA;
        return KfState::new(
            Vector4::new(z1.east, z1.north, 0.0, 0.0),
            Matrix4::from_diagonal(&Vector4::new(s1, s1, vv, vv)),
            t,
        );
    };
    let z2 = measured_position(second.point)?;
    let s2 = second.noise.position_sigma.powi(2);
    let dt = second.point.timestamp - t;
    let v = z2.sub(z1).scale(1.0 / dt);
    let cross = -s1 / dt;
    let vv = (s1 + s2) / (dt * dt);
    let cov = Matrix4::new(
        s1, 0.0, cross, 0.0, //
        0.0, s1, 0.0, cross, //
        cross, 0.0, vv, 0.0, //
        0.0, cross, 0.0, vv,
    );
    KfState::new(Vector4::new(z1.east, z1.north, v.east, v.north), cov, t)
}

fn median_interval(traj: &Trajectory) -> Option<f64> {
    let mut d: Vec<f64> = traj
        .points()
        .windows(2)
        .map(|w| w[1].timestamp - w[0].timestamp)
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

const GRID_EPS: f64 = 1e-9;

/// Fuses one group into a track sampled on the absolute `k / rate` grid.
///
/// Measurements are processed in `(timestamp, sensor_id, track_id)` order.
/// A silence longer than `track_timeout_s` closes the track; it restarts at
/// the next measurement.
pub fn fuse_group(
    fused_id: impl Into<String>,
    group: &TrackGroup,
    noise: &NoiseConfig,
    options: &FusionOptions,
) -> Result<FusedTrack> {
    let fused_id = fused_id.into();
    if !(options.output_rate_hz > 0.0 && options.track_timeout_s > 0.0) {
        return Err(Error::InvalidValue(
            "output rate and track timeout must be positive".into(),
        ));
    }
    let mut ms: Vec<Measurement> = group
        .members
        .iter()
        .flat_map(|(sid, traj)| {
            let n = noise.sensor(sid);
            traj.points().iter().map(move |p| Measurement {
                sensor_id: sid,
                track_id: &traj.track_id,
                point: p,
                noise: n,
            })
        })
        .collect();
    if ms.is_empty() {
        return Err(Error::EmptyInput);
    }
    ms.sort_by(|a, b| {
        a.point
            .timestamp
            .total_cmp(&b.point.timestamp)
            .then_with(|| a.sensor_id.cmp(b.sensor_id))
            .then_with(|| a.track_id.cmp(b.track_id))
    });

    // Segments separated by silences longer than the timeout.
    let mut segments: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    for i in 1..ms.len() {
        if ms[i].point.timestamp - ms[i - 1].point.timestamp > options.track_timeout_s {
            segments.push(start..i);
            start = i;
        }
    }
    segments.push(start..ms.len());

    let rate = options.output_rate_hz;
    let mut states = Vec::new();
    let mut contributors: Vec<Vec<Contributor>> = Vec::new();
    let mut gaps = Vec::new();
    let mut outages = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        if si > 0 {
            outages.push((
                ms[seg.start - 1].point.timestamp,
                ms[seg.start].point.timestamp,
            ));
        }
        let seg_ms = &ms[seg.clone()];
        let first = &seg_ms[0];
        let second_idx = seg_ms.iter().position(|m| {
            m.sensor_id == first.sensor_id
                && m.track_id == first.track_id
                && m.point.timestamp > first.point.timestamp
                && m.point.timestamp - first.point.timestamp <= options.init_max_dt
        });
        let mut state = initial_state(first, second_idx.map(|i| &seg_ms[i]))?;
        let (t_first, t_last) = (
            first.point.timestamp,
            seg_ms[seg_ms.len() - 1].point.timestamp,
        );

        let k0 = (t_first * rate - GRID_EPS).ceil() as i64;
        let k1 = (t_last * rate + GRID_EPS).floor() as i64;
        let mut grid: Vec<f64> = (k0..=k1).map(|k| k as f64 / rate).collect();
        if grid.is_empty() {
            grid.push(t_first);
        }

        let mut next = 1;
        let mut last_meas_time = t_first;
        let mut window: Vec<(f64, Contributor)> = vec![(t_first, first.contributor())];
        let mut gap_start: Option<f64> = None;
        for g in grid {
            while next < seg_ms.len() && seg_ms[next].point.timestamp <= g + GRID_EPS {
                let m = &seg_ms[next];
                state = kf_predict(&state, m.point.timestamp.max(state.timestamp), noise)?;
                if Some(next) != second_idx {
                    let mut at = m.point.clone();
                    at.timestamp = state.timestamp;
                    state = kf_update_with(&state, &at, &m.noise)?;
                }
                window.push((m.point.timestamp, m.contributor()));
                last_meas_time = m.point.timestamp;
                next += 1;
            }
            state = kf_predict(&state, g.max(state.timestamp), noise)?;
            let lo = g - 1.0 / rate;
            window.retain(|(t, _)| *t > lo + GRID_EPS);
            let mut here: Vec<Contributor> = window.iter().map(|(_, c)| c.clone()).collect();
            here.sort();
            here.dedup();
            if here.is_empty() {
                gap_start.get_or_insert(last_meas_time);
            } else if let Some(s) = gap_start.take() {
                gaps.push((s, last_meas_time));
            }
            let mut emitted = state.clone();
            emitted.timestamp = g;
            states.push(emitted);
            contributors.push(here);
        }
        if let Some(s) = gap_start.take() {
            let end = seg_ms.get(next).map_or(t_last, |m| m.point.timestamp);
            gaps.push((s, end));
        }
    }

    let mut source_gaps = Vec::new();
    for (sid, traj) in &group.members {
        let Some(med) = median_interval(traj) else {
            continue;
        };
        for w in traj.points().windows(2) {
            if w[1].timestamp - w[0].timestamp > 3.0 * med + GRID_EPS {
                source_gaps.push(SourceGap {
                    sensor_id: sid.clone(),
                    track_id: traj.track_id.clone(),
                    start: w[0].timestamp,
                    end: w[1].timestamp,
                });
            }
        }
    }
    Ok(FusedTrack {
        fused_id,
        states,
        contributors,
        gaps,
        source_gaps,
        outages,
    })
}

/// Fuses every group concurrently; output order follows `groups`, with
/// ids `fused-0001`, `fused-0002`, ...
pub fn fuse_all(
    groups: &[TrackGroup],
    noise: &NoiseConfig,
    options: &FusionOptions,
) -> Result<Vec<FusedTrack>> {
    noise.validate()?;
    groups
        .par_iter()
        .enumerate()
        .map(|(i, g)| fuse_group(format!("fused-{:04}", i + 1), g, noise, options))
        .collect()
}

/// One fused state as written to the fused-track stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedRecord {
    pub ts: f64,
    pub fused_id: String,
    pub east: f64,
    pub north: f64,
    pub v_east: f64,
    pub v_north: f64,
    pub pos_sigma: f64,
    pub contributors: Vec<String>,
}

impl FusedTrack {
    pub fn records(&self) -> Vec<FusedRecord> {
        self.states
            .iter()
            .zip(&self.contributors)
            .map(|(s, c)| FusedRecord {
                ts: s.timestamp,
                fused_id: self.fused_id.clone(),
                east: s.mean[0],
                north: s.mean[1],
                v_east: s.mean[2],
                v_north: s.mean[3],
                pos_sigma: s.position_sigma(),
                contributors: c.iter().map(|(s, t)| format!("{s}/{t}")).collect(),
            })
            .collect()
    }

    /// The fused states as an AEQD trajectory carrying velocities.
    pub fn to_trajectory(&self, class: crate::model::ObjectClass) -> Result<Trajectory> {
        let points = self
            .states
            .iter()
            .map(|s| {
                TrackPoint::new(
                    s.timestamp,
                    Position::Aeqd(s.position()),
                    Some(s.velocity()),
                    class,
                    self.fused_id.clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(self.fused_id.clone(), Frame::Aeqd, points)
    }
}
