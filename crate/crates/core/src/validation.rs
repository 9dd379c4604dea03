//! Accuracy of sensor tracks against an RTK-GNSS reference trajectory.
//!
//! Errors are measured at the sensor's timestamps with the GNSS trajectory
//! interpolated there, and split into a longitudinal part along the GNSS
//! direction of travel and a lateral part across it.

use serde::{Deserialize, Serialize};

use crate::calibration::{estimate_time_offset, LagSearch};
use crate::error::{Error, Result};
use crate::model::{LocalPoint, ObjectClass, SensorDataset, Trajectory};

/// Half of a 3.6 m lane.
pub const LANE_LEVEL_THRESHOLD_M: f64 = 1.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationOptions {
    pub lane_threshold_m: f64,
    /// Correspondence gap limit and lag grid. `align` is ignored; tracks
    /// and GNSS share a frame.
    pub lag_search: LagSearch,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            lane_threshold_m: LANE_LEVEL_THRESHOLD_M,
            lag_search: LagSearch {
                align: false,
                ..LagSearch::default()
            },
        }
    }
}

/// Error of one compared sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    /// Sensor timestamp after lag removal.
    pub ts: f64,
    pub error: f64,
    /// Signed, positive when the track lies left of the direction of travel.
    pub lateral: f64,
    /// Signed, positive when the track is ahead of the GNSS position.
    pub longitudinal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub matched_track_id: String,
    pub n_compared: usize,
    pub rmse: f64,
    pub mean_error: f64,
    pub max_error: f64,
    pub lateral_rmse: f64,
    pub longitudinal_rmse: f64,
    /// Seconds the track runs late relative to GNSS; zero when not
    /// estimated.
    pub estimated_lag: f64,
    /// False when lag correction was requested but the lag was unobservable.
    pub lag_estimated: bool,
    pub lane_level_pass: bool,
    #[serde(skip)]
    pub samples: Vec<SampleError>,
}

fn same_planar_frame(track: &Trajectory, gnss: &Trajectory) -> Result<()> {
    if track.frame != gnss.frame || track.frame == crate::model::Frame::Wgs84 {
        return Err(Error::FrameMismatch {
            expected: format!(
                "one planar frame for track and GNSS (GNSS is {})",
                gnss.frame
            ),
            found: track.frame.to_string(),
        });
    }
    Ok(())
}

/// Unit direction of travel at each GNSS sample from central differences,
/// one-sided at the ends. Zero where the vehicle did not move.
fn gnss_tangents(points: &[LocalPoint]) -> Vec<LocalPoint> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let (a, b) = (points[i.saturating_sub(1)], points[(i + 1).min(n - 1)]);
            let d = b.sub(a);
            let len = d.norm();
            if len > 0.0 {
                d.scale(1.0 / len)
            } else {
                LocalPoint::ORIGIN
            }
        })
        .collect()
}

/// Interpolated unit tangent at `t`, or `None` when it vanishes.
fn tangent_at(times: &[f64], tangents: &[LocalPoint], t: f64) -> Option<LocalPoint> {
    let i = times.partition_point(|&x| x <= t);
    let u = if i == 0 {
        tangents[0]
    } else if i >= times.len() {
        tangents[times.len() - 1]
    } else {
        let w = (t - times[i - 1]) / (times[i] - times[i - 1]);
        tangents[i - 1].lerp(tangents[i], w)
    };
    let len = u.norm();
    (len > 1e-12).then(|| u.scale(1.0 / len))
}

fn pointwise(track: &Trajectory, gnss: &Trajectory, max_gap: f64) -> Result<Vec<SampleError>> {
    let g_points = gnss.planar_points()?;
    let g_times = gnss.timestamps();
    let tangents = gnss_tangents(&g_points);
    let mut out = Vec::new();
    for p in track.points() {
        let Some(s) = gnss.sample_at(p.timestamp) else {
            continue;
        };
        if s.gap > max_gap {
            continue;
        }
        let e = p.planar()?.sub(s.point.planar()?);
        let error = e.norm();
        // A stationary reference has no direction; the whole error counts
        // as lateral.
        let (longitudinal, lateral) = match tangent_at(&g_times, &tangents, p.timestamp) {
            Some(u) => (e.dot(u), e.dot(LocalPoint::new(-u.north, u.east))),
            None => (0.0, error),
        };
        out.push(SampleError {
            ts: p.timestamp,
            error,
            lateral,
            longitudinal,
        });
    }
    Ok(out)
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (sum / n as f64).sqrt()
}

/// Compares a sensor track with the GNSS trajectory, optionally removing
/// the clock lag that best aligns them first.
pub fn compare_to_ground_truth(
    track: &Trajectory,
    gnss: &Trajectory,
    correct_lag: bool,
    options: &ValidationOptions,
) -> Result<ValidationReport> {
    same_planar_frame(track, gnss)?;
    let search = LagSearch {
        align: false,
        ..options.lag_search
    };
    let (lag, lag_estimated) = if correct_lag {
        match estimate_time_offset(track, gnss, &search) {
            Ok(est) => (est.lag, true),
            Err(Error::FlatObjective { .. } | Error::InsufficientOverlap(_)) => (0.0, false),
            Err(e) => return Err(e),
        }
    } else {
        (0.0, false)
    };
    let shifted = if lag == 0.0 {
        track.clone()
    } else {
        track.time_shifted(-lag)
    };
    let samples = pointwise(&shifted, gnss, search.max_gap)?;
    if samples.len() < 2 {
        return Err(Error::InsufficientOverlap(format!(
            "{} comparable samples between track {} and GNSS",
            samples.len(),
            track.track_id
        )));
    }
    let n = samples.len();
    let lateral_rmse = rms(samples.iter().map(|s| s.lateral));
    Ok(ValidationReport {
        matched_track_id: track.track_id.clone(),
        n_compared: n,
        rmse: rms(samples.iter().map(|s| s.error)),
        mean_error: samples.iter().map(|s| s.error).sum::<f64>() / n as f64,
        max_error: samples.iter().map(|s| s.error).fold(0.0, f64::max),
        lateral_rmse,
        longitudinal_rmse: rms(samples.iter().map(|s| s.longitudinal)),
        estimated_lag: lag,
        lag_estimated,
        lane_level_pass: lateral_rmse < options.lane_threshold_m,
        samples,
    })
}

/// Result of picking the GNSS-equipped vehicle out of a sensor dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub track_id: String,
    /// Mean time-synchronized distance to GNSS inside the window, meters.
    pub mean_distance: f64,
    pub candidates_considered: usize,
}

/// Selects the track of `expected_class` that overlaps `window` and stays
/// closest to the GNSS trajectory inside it. Ties go to the smaller id.
pub fn identify_test_vehicle(
    dataset: &SensorDataset,
    gnss: &Trajectory,
    window: (f64, f64),
    expected_class: ObjectClass,
    max_gap: f64,
) -> Result<Identification> {
    let (w0, w1) = window;
    if !(w0 <= w1) {
        return Err(Error::InvalidValue(format!(
            "window start {w0} is after its end {w1}"
        )));
    }
    let in_window: Vec<&Trajectory> = dataset
        .trajectories
        .values()
        .filter(|t| match (t.start_time(), t.end_time()) {
            (Some(a), Some(b)) => a <= w1 && b >= w0,
            _ => false,
        })
        .collect();
    let of_class: Vec<&Trajectory> = in_window
        .iter()
        .copied()
        .filter(|t| t.dominant_class() == expected_class)
        .collect();

    let mut best: Option<(f64, &str)> = None;
    let mut considered = 0;
    for t in &of_class {
        same_planar_frame(t, gnss)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for p in t
            .points()
            .iter()
            .filter(|p| p.timestamp >= w0 && p.timestamp <= w1)
        {
            let Some(s) = gnss.sample_at(p.timestamp) else {
                continue;
            };
            if s.gap > max_gap {
                continue;
            }
            sum += p.planar()?.distance(s.point.planar()?);
            n += 1;
        }
        if n < 2 {
            continue;
        }
        considered += 1;
        let d = sum / n as f64;
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && t.track_id.as_str() < bid),
        };
        if better {
            best = Some((d, &t.track_id));
        }
    }
    best.map(|(d, id)| Identification {
        track_id: id.to_string(),
        mean_distance: d,
        candidates_considered: considered,
    })
    .ok_or_else(|| {
        Error::NoCandidate(format!(
            "sensor {}: {} tracks, {} overlap window [{w0}, {w1}], {} of class {expected_class}, \
             none with 2 GNSS-synchronized samples",
            dataset.sensor_id,
            dataset.trajectories.len(),
            in_window.len(),
            of_class.len()
        ))
    })
}
