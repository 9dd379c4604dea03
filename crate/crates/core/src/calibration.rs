//! Automatic extrinsic calibration.
//!
//! A sensor's trajectory `A` (its own planar frame) is paired in time with a
//! reference trajectory `B` (already in the target frame), and the rotation
//! `R` and translation `t` minimizing `||R a_i + t - b_i||` over all pairs are
//! found in closed form:
//!
//! 1. center both point sets on their means `a_bar`, `b_bar`;
//! 2. form the cross-covariance `H = sum (a_i - a_bar)(b_i - b_bar)^T`;
//! 3. decompose `H = U S V^T`;
//! 4. take `R = V U^T`, negating the last column of `V` first when that
//!    product would be a reflection (`det < 0`);
//! 5. set `t = b_bar - R a_bar`.
//!
//! No scale is estimated. Sensor clock lag is found separately by a grid
//! search over time shifts ([`estimate_time_offset`]) before the final
//! alignment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{det2, heading_azimuth_deg, mat_vec, rotation_angle, Mat2, RigidTransform2D};
use crate::model::{Frame, LocalPoint, Trajectory};

/// Time-paired point rows: `a[i]` (sensor) and `b[i]` (reference) at
/// `timestamps[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub a: Vec<LocalPoint>,
    pub b: Vec<LocalPoint>,
    pub timestamps: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn new(a: Vec<LocalPoint>, b: Vec<LocalPoint>, timestamps: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.len() != timestamps.len() {
            return Err(Error::InvalidValue(format!(
                "correspondence rows differ: {} sensor, {} reference, {} timestamps",
                a.len(),
                b.len(),
                timestamps.len()
            )));
        }
        if a.len() < 2 {
            return Err(Error::Underdetermined(format!(
                "{} correspondences, need 2",
                a.len()
            )));
        }
        Ok(Self { a, b, timestamps })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Singular value decomposition `M = U diag(s) V^T` of a 2x2 matrix, with
/// `s[0] >= s[1] >= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Svd2 {
    pub u: Mat2,
    pub singular: [f64; 2],
    pub v: Mat2,
}

/// Closed-form 2x2 SVD.
///
/// Any 2x2 matrix factors as `rot(phi) diag(q + r, q - r) rot(psi)` with
/// `q = |(E, H)|`, `r = |(F, G)|` built from the symmetric and antisymmetric
/// parts. A negative second factor is folded into `U`.
pub fn svd2(m: &Mat2) -> Svd2 {
    let e = (m[0][0] + m[1][1]) / 2.0;
    let f = (m[0][0] - m[1][1]) / 2.0;
    let g = (m[1][0] + m[0][1]) / 2.0;
    let h = (m[1][0] - m[0][1]) / 2.0;
    let q = e.hypot(h);
    let r = f.hypot(g);
    let (s1, s2) = (q + r, q - r);
    let a1 = g.atan2(f);
    let a2 = h.atan2(e);
    let psi = (a2 - a1) / 2.0;
    let phi = (a2 + a1) / 2.0;
    let (sp, cp) = phi.sin_cos();
    let (ss, cs) = psi.sin_cos();
    // V = rot(psi)^T = rot(-psi)
    let v = [[cs, ss], [-ss, cs]];
    if s2 < 0.0 {
        Svd2 {
            u: [[cp, sp], [sp, -cp]],
            singular: [s1, -s2],
            v,
        }
    } else {
        Svd2 {
            u: [[cp, -sp], [sp, cp]],
            singular: [s1, s2],
            v,
        }
    }
}

fn mat_mul_bt(a: &Mat2, b: &Mat2) -> Mat2 {
    // a * b^T
    let mut out = [[0.0; 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[j][0] + a[i][1] * b[j][1];
        }
    }
    out
}

/// Outcome of a rigid alignment mapping sensor points onto the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Orthogonal, determinant +1.
    pub rotation: Mat2,
    pub translation: LocalPoint,
    /// Root-mean-square residual after alignment, meters.
    pub rmse: f64,
    /// Compass-heading equivalent of `rotation`, degrees in (-180, 180].
    pub yaw_deg: f64,
    pub reflection_corrected: bool,
    /// `s2 / s1` of the cross-covariance; near zero for collinear tracks,
    /// where the rotation is weakly constrained.
    pub condition: f64,
    pub n: usize,
}

impl AlignmentResult {
    pub fn theta(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// The alignment as a transform rotating about the sensor origin.
    pub fn transform(&self) -> RigidTransform2D {
        RigidTransform2D::new(self.theta(), self.translation, LocalPoint::ORIGIN)
    }

    pub fn apply(&self, p: LocalPoint) -> LocalPoint {
        mat_vec(&self.rotation, p).add(self.translation)
    }
}

/// Condition-indicator level below which a calibration should be flagged.
pub const WEAK_GEOMETRY_CONDITION: f64 = 0.01;

fn mean(points: &[LocalPoint]) -> LocalPoint {
    let n = points.len() as f64;
    let (e, nn) = points
        .iter()
        .fold((0.0, 0.0), |(e, n), p| (e + p.east, n + p.north));
    LocalPoint::new(e / n, nn / n)
}

/// Least-squares rigid alignment of `c.a` onto `c.b`.
pub fn procrustes_align(c: &CorrespondenceSet) -> Result<AlignmentResult> {
    let n = c.len();
    if n < 2 || c.b.len() != n {
        return Err(Error::Underdetermined(format!(
            "{n} correspondences, need 2"
        )));
    }
    let a_bar = mean(&c.a);
    let b_bar = mean(&c.b);

    let mut h = [[0.0; 2]; 2];
    let mut spread = 0.0f64;
    for (a, b) in c.a.iter().zip(&c.b) {
        let da = a.sub(a_bar);
        let db = b.sub(b_bar);
        spread = spread.max(da.norm());
        h[0][0] += da.east * db.east;
        h[0][1] += da.east * db.north;
        h[1][0] += da.north * db.east;
        h[1][1] += da.north * db.north;
    }
    if spread <= f64::EPSILON * (1.0 + a_bar.norm()) {
        return Err(Error::Underdetermined(
            "all sensor points coincide; rotation is undefined".into(),
        ));
    }

    let Svd2 { u, singular, mut v } = svd2(&h);
    let mut rotation = mat_mul_bt(&v, &u);
    let reflection_corrected = det2(&rotation) < 0.0;
    if reflection_corrected {
        v[0][1] = -v[0][1];
        v[1][1] = -v[1][1];
        rotation = mat_mul_bt(&v, &u);
    }
    let translation = b_bar.sub(mat_vec(&rotation, a_bar));

    let sq: f64 =
        c.a.iter()
            .zip(&c.b)
            .map(|(a, b)| {
                let r = mat_vec(&rotation, *a).add(translation).sub(*b);
                r.dot(r)
            })
            .sum();
    let condition = if singular[0] > 0.0 {
        singular[1] / singular[0]
    } else {
        0.0
    };
    Ok(AlignmentResult {
        rotation,
        translation,
        rmse: (sq / n as f64).sqrt(),
        yaw_deg: heading_azimuth_deg(rotation_angle(&rotation)),
        reflection_corrected,
        condition,
        n,
    })
}

fn require_planar(t: &Trajectory, role: &str) -> Result<()> {
    if t.frame == Frame::Wgs84 {
        return Err(Error::FrameMismatch {
            expected: format!("planar frame for {role} trajectory"),
            found: t.frame.to_string(),
        });
    }
    Ok(())
}

/// Pairs every sensor sample with the reference interpolated at the same
/// time, keeping rows whose reference bracket is at most `max_dt` wide.
pub fn build_correspondences(
    sensor_traj: &Trajectory,
    reference_traj: &Trajectory,
    max_dt: f64,
) -> Result<CorrespondenceSet> {
    require_planar(sensor_traj, "sensor")?;
    require_planar(reference_traj, "reference")?;
    if !(max_dt > 0.0) {
        return Err(Error::InvalidValue(format!(
            "max_dt must be positive, got {max_dt}"
        )));
    }
    for (t, role) in [(sensor_traj, "sensor"), (reference_traj, "reference")] {
        if t.len() < 2 {
            return Err(Error::InsufficientOverlap(format!(
                "{role} trajectory {} has {} points",
                t.track_id,
                t.len()
            )));
        }
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut timestamps = Vec::new();
    for p in sensor_traj.points() {
        let Some(s) = reference_traj.sample_at(p.timestamp) else {
            continue;
        };
        if s.gap > max_dt {
            continue;
        }
        a.push(p.planar()?);
        b.push(s.point.planar()?);
        timestamps.push(p.timestamp);
    }
    if a.len() < 2 {
        return Err(Error::InsufficientOverlap(format!(
            "{} time-synchronized pairs between {} and {}",
            a.len(),
            sensor_traj.track_id,
            reference_traj.track_id
        )));
    }
    Ok(CorrespondenceSet { a, b, timestamps })
}

/// Default overlap penalty for candidate scoring, meter-samples.
pub const DEFAULT_OVERLAP_PENALTY: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateMatch {
    pub track_id: String,
    pub alignment: AlignmentResult,
    /// `rmse + penalty / overlap`; lower is better.
    pub score: f64,
}

/// Aligns every candidate to the reference and returns the one with the best
/// overlap-penalized residual. Ties go to the lexicographically smaller id.
pub fn select_best_candidate(
    candidates: &[Trajectory],
    reference: &Trajectory,
    max_dt: f64,
    overlap_penalty: f64,
) -> Result<CandidateMatch> {
    if candidates.is_empty() {
        return Err(Error::NoCandidate("candidate list is empty".into()));
    }
    let scored: Vec<CandidateMatch> = candidates
        .par_iter()
        .filter_map(|cand| {
            let corr = build_correspondences(cand, reference, max_dt).ok()?;
            let alignment = procrustes_align(&corr).ok()?;
            Some(CandidateMatch {
                track_id: cand.track_id.clone(),
                score: alignment.rmse + overlap_penalty / alignment.n as f64,
                alignment,
            })
        })
        .collect();
    scored
        .into_iter()
        .min_by(|x, y| {
            x.score
                .total_cmp(&y.score)
                .then_with(|| x.track_id.cmp(&y.track_id))
        })
        .ok_or_else(|| {
            Error::NoCandidate(format!(
                "none of {} candidates has 2 synchronized samples with reference {}",
                candidates.len(),
                reference.track_id
            ))
        })
}

/// Parameters of the clock-lag grid search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagSearch {
    /// Lags in `[-window, window]` are tried, seconds.
    pub window: f64,
    pub step: f64,
    /// Maximum reference bracket width for a correspondence, seconds.
    pub max_gap: f64,
    /// Fit a rigid transform at every lag (sensor in its own frame) or
    /// compare positions directly (both already in one frame).
    pub align: bool,
}

impl Default for LagSearch {
    fn default() -> Self {
        Self {
            window: 1.0,
            step: 0.01,
            max_gap: 0.5,
            align: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagEstimate {
    /// Seconds by which sensor timestamps run late: the sensor sample stamped
    /// `t` shows the reference state at `t - lag`.
    pub lag: f64,
    pub rmse: f64,
    /// `(lag, rmse)` for every grid lag that produced correspondences.
    pub profile: Vec<(f64, f64)>,
}

/// Mean squared residual between the sensor (timestamps shifted by `-lag`)
/// and the reference; `None` when fewer than two pairs survive.
pub fn lag_objective(
    sensor: &Trajectory,
    reference: &Trajectory,
    lag: f64,
    search: &LagSearch,
) -> Option<(f64, usize)> {
    let shifted = sensor.time_shifted(-lag);
    let corr = build_correspondences(&shifted, reference, search.max_gap).ok()?;
    let mse = if search.align {
        procrustes_align(&corr).ok()?.rmse.powi(2)
    } else {
        corr.a
            .iter()
            .zip(&corr.b)
            .map(|(a, b)| {
                let d = a.sub(*b);
                d.dot(d)
            })
            .sum::<f64>()
            / corr.len() as f64
    };
    Some((mse, corr.len()))
}

/// Minimum rmse spread across the lag grid below which the lag is treated
/// as unobservable, meters.
pub const FLAT_OBJECTIVE_SPREAD: f64 = 1e-6;

/// Grid search for the sensor clock lag relative to the reference, refined
/// by a parabola through the best grid point and its neighbours.
pub fn estimate_time_offset(
    sensor: &Trajectory,
    reference: &Trajectory,
    search: &LagSearch,
) -> Result<LagEstimate> {
    require_planar(sensor, "sensor")?;
    require_planar(reference, "reference")?;
    if !(search.window > 0.0 && search.step > 0.0 && search.step <= search.window) {
        return Err(Error::InvalidValue(format!(
            "lag search needs 0 < step <= window, got step {} window {}",
            search.step, search.window
        )));
    }
    let (Some(s0), Some(s1), Some(r0), Some(r1)) = (
        sensor.start_time(),
        sensor.end_time(),
        reference.start_time(),
        reference.end_time(),
    ) else {
        return Err(Error::InsufficientOverlap("empty trajectory".into()));
    };
    let overlap = s1.min(r1) - s0.max(r0);
    if overlap < 5.0 * search.window {
        return Err(Error::InsufficientOverlap(format!(
            "time overlap {overlap:.3} s is shorter than 5x the {} s search window",
            search.window
        )));
    }

    let k_max = (search.window / search.step).round() as i64;
    let grid: Vec<(f64, Option<f64>)> = (-k_max..=k_max)
        .into_par_iter()
        .map(|k| {
            let lag = k as f64 * search.step;
            (
                lag,
                lag_objective(sensor, reference, lag, search).map(|(mse, _)| mse),
            )
        })
        .collect();
    let profile: Vec<(f64, f64)> = grid
        .iter()
        .filter_map(|&(lag, mse)| mse.map(|m| (lag, m.sqrt())))
        .collect();
    if profile.is_empty() {
        return Err(Error::InsufficientOverlap(
            "no lag in the search window produced two synchronized pairs".into(),
        ));
    }
    let (lo, hi) = profile
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, r)| {
            (lo.min(r), hi.max(r))
        });
    if hi - lo < FLAT_OBJECTIVE_SPREAD {
        return Err(Error::FlatObjective { spread: hi - lo });
    }

    // Best grid point; ties resolve to the smallest |lag|.
    let (best_idx, best_mse) = grid
        .iter()
        .enumerate()
        .filter_map(|(i, &(lag, m))| m.map(|m| (i, lag, m)))
        .min_by(|x, y| x.2.total_cmp(&y.2).then(x.1.abs().total_cmp(&y.1.abs())))
        .map(|(i, _, m)| (i, m))
        .expect("profile is non-empty");
    let mut lag = grid[best_idx].0;
    let mut mse = best_mse;

    let neighbours = (
        best_idx.checked_sub(1).and_then(|i| grid[i].1),
        grid.get(best_idx + 1).and_then(|g| g.1),
    );
    if let (Some(fm), Some(fp)) = neighbours {
        let curvature = fm - 2.0 * best_mse + fp;
        if curvature > 0.0 {
            let delta = (0.5 * (fm - fp) / curvature).clamp(-0.5, 0.5) * search.step;
            let refined = lag + delta;
            if let Some((m, _)) = lag_objective(sensor, reference, refined, search) {
                if m < mse {
                    lag = refined;
                    mse = m;
                }
            }
        }
    }
    Ok(LagEstimate {
        lag,
        rmse: mse.sqrt(),
        profile,
    })
}
