//! Analytic motions and noise helpers for examples, tests and benchmarks.
//!
//! The weaving motion has varying speed and curvature, so neither a time
//! shift nor a rigid transform can imitate the other. That makes clock lag
//! observable even when a rigid alignment is fitted at every trial lag.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::{Frame, LocalPoint, ObjectClass, Position, TrackPoint, Trajectory, Velocity};

/// Position and velocity `tau` seconds into the weaving motion whose mean
/// eastbound speed is `speed`.
pub fn weaving_state(tau: f64, speed: f64) -> (LocalPoint, Velocity) {
    let k = speed / 15.0;
    let east = speed * tau + 8.0 * k * (0.35 * tau).sin();
    let north = 25.0 * k * (0.12 * tau).sin() + 4.0 * k * (0.5 * tau).cos();
    let v_east = speed + 8.0 * k * 0.35 * (0.35 * tau).cos();
    let v_north = 25.0 * k * 0.12 * (0.12 * tau).cos() - 4.0 * k * 0.5 * (0.5 * tau).sin();
    (LocalPoint::new(east, north), Velocity::new(v_east, v_north))
}

/// Samples [`weaving_state`] at `rate` Hz over `[start, start + duration]`.
pub fn weaving_trajectory(
    track_id: &str,
    frame: Frame,
    start: f64,
    duration: f64,
    rate: f64,
    speed: f64,
) -> Result<Trajectory> {
    sampled(track_id, frame, start, duration, rate, |tau| {
        weaving_state(tau, speed)
    })
}

/// Straight constant-velocity motion from `p0`.
pub fn straight_trajectory(
    track_id: &str,
    frame: Frame,
    start: f64,
    duration: f64,
    rate: f64,
    p0: LocalPoint,
    v: Velocity,
) -> Result<Trajectory> {
    sampled(track_id, frame, start, duration, rate, |tau| {
        (p0.add(v.as_point().scale(tau)), v)
    })
}

fn sampled(
    track_id: &str,
    frame: Frame,
    start: f64,
    duration: f64,
    rate: f64,
    state: impl Fn(f64) -> (LocalPoint, Velocity),
) -> Result<Trajectory> {
    let n = (duration * rate).round() as usize;
    let points = (0..=n)
        .map(|k| {
            let tau = k as f64 / rate;
            let (p, v) = state(tau);
            TrackPoint::new(
                start + tau,
                Position::planar_in(frame, p)?,
                Some(v),
                ObjectClass::PassengerVehicle,
                track_id,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(track_id, frame, points)
}

/// Copy of a planar trajectory with isotropic Gaussian position noise.
pub fn with_position_noise(
    traj: &Trajectory,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let normal = Normal::new(0.0, sigma).map_err(|e| crate::Error::InvalidValue(e.to_string()))?;
    let points = traj
        .points()
        .iter()
        .map(|p| {
            let q = p.planar()?;
            let noisy = LocalPoint::new(q.east + normal.sample(rng), q.north + normal.sample(rng));
            Ok(TrackPoint {
                position: Position::planar_in(traj.frame, noisy)?,
                ..p.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(traj.track_id.clone(), traj.frame, points)
}

/// Relabels a planar trajectory's frame without moving any point.
pub fn in_frame(traj: &Trajectory, frame: Frame) -> Result<Trajectory> {
    let points = traj
        .points()
        .iter()
        .map(|p| {
            Ok(TrackPoint {
                position: Position::planar_in(frame, p.planar()?)?,
                ..p.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(traj.track_id.clone(), frame, points)
}

/// `n` points uniform in the square `[-half, half]^2`.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<LocalPoint> {
    (0..n)
        .map(|_| LocalPoint::new(rng.random_range(-half..half), rng.random_range(-half..half)))
        .collect()
}
