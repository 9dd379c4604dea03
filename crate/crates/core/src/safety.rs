//! Short-horizon prediction and surrogate safety measures.
//!
//! Agents are points with a configurable radius. Predicted paths are sampled
//! on a uniform grid and treated as piecewise linear between samples, which
//! is exact for constant-velocity motion. Metrics:
//!
//! * time to collision: earliest offset into the horizon at which the two
//!   agents come within the collision radius;
//! * post-encroachment time: gap between the two agents' passages through a
//!   shared spatial conflict zone, regardless of when they were there;
//! * minimum predicted distance and the time it occurs.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::KfState;
use crate::model::{LocalPoint, ObjectClass, TrackPoint, Trajectory, Velocity};
use crate::wkt::parse_wkt_polygon;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    ConstantVelocity,
    ConstantAcceleration,
}

/// Kinematic snapshot used to seed a prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionState {
    pub timestamp: f64,
    pub position: LocalPoint,
    pub velocity: Option<Velocity>,
}

impl From<&KfState> for MotionState {
    fn from(s: &KfState) -> Self {
        Self {
            timestamp: s.timestamp,
            position: s.position(),
            velocity: Some(s.velocity()),
        }
    }
}

impl TryFrom<&TrackPoint> for MotionState {
    type Error = Error;

    fn try_from(p: &TrackPoint) -> Result<Self> {
        Ok(Self {
            timestamp: p.timestamp,
            position: p.planar()?,
            velocity: p.velocity,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedPath {
    pub source_id: String,
    pub object_class: ObjectClass,
    pub step: f64,
    /// `(timestamp, position)` at `start + k * step`, `k = 0..`.
    pub samples: Vec<(f64, LocalPoint)>,
    pub model: MotionModel,
    /// Constant acceleration was requested but fewer than two states with
    /// velocity were available.
    pub fallback: bool,
}

impl PredictedPath {
    pub fn start(&self) -> f64 {
        self.samples[0].0
    }
}

/// Longest prediction horizon accepted, seconds.
pub const MAX_HORIZON_S: f64 = 30.0;

/// Predicts from the last entry of `history` (oldest first). Constant
/// acceleration takes the finite difference of the last two velocities.
pub fn predict_path(
    source_id: impl Into<String>,
    object_class: ObjectClass,
    history: &[MotionState],
    horizon: f64,
    step: f64,
    model: MotionModel,
) -> Result<PredictedPath> {
    let source_id = source_id.into();
    if !(horizon > 0.0 && step > 0.0 && horizon <= MAX_HORIZON_S && step <= horizon) {
        return Err(Error::InvalidValue(format!(
            "prediction needs 0 < step <= horizon <= {MAX_HORIZON_S}, got step {step} horizon {horizon}"
        )));
    }
    let last = history.last().ok_or(Error::EmptyInput)?;
    let v = last
        .velocity
        .ok_or_else(|| Error::MissingVelocity(source_id.clone()))?;
    let mut accel = LocalPoint::ORIGIN;
    let mut fallback = false;
    if model == MotionModel::ConstantAcceleration {
        match history.len().checked_sub(2).map(|i| &history[i]) {
            Some(prev) if prev.velocity.is_some() && last.timestamp > prev.timestamp => {
                let pv = prev.velocity.expect("checked");
                let dt = last.timestamp - prev.timestamp;
                accel = LocalPoint::new((v.east - pv.east) / dt, (v.north - pv.north) / dt);
            }
            _ => fallback = true,
        }
    }
    let n = (horizon / step + 1e-9).floor() as usize;
    let samples = (0..=n)
        .map(|k| {
            let tau = k as f64 * step;
            let p = last
                .position
                .add(v.as_point().scale(tau))
                .add(accel.scale(0.5 * tau * tau));
            (last.timestamp + tau, p)
        })
        .collect();
    Ok(PredictedPath {
        source_id,
        object_class,
        step,
        samples,
        model: if fallback {
            MotionModel::ConstantVelocity
        } else {
            model
        },
        fallback,
    })
}

fn check_aligned(a: &PredictedPath, b: &PredictedPath) -> Result<()> {
    let ok = a.samples.len() == b.samples.len()
        && !a.samples.is_empty()
        && (a.step - b.step).abs() <= 1e-9
        && (a.start() - b.start()).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(Error::MisalignedSampling(format!(
            "{} ({} samples from {} every {}) vs {} ({} samples from {} every {})",
            a.source_id,
            a.samples.len(),
            a.samples.first().map_or(f64::NAN, |s| s.0),
            a.step,
            b.source_id,
            b.samples.len(),
            b.samples.first().map_or(f64::NAN, |s| s.0),
            b.step
        )))
    }
}

/// Relative positions `a - b` at every sample.
fn relative(a: &PredictedPath, b: &PredictedPath) -> Vec<LocalPoint> {
    a.samples
        .iter()
        .zip(&b.samples)
        .map(|(p, q)| p.1.sub(q.1))
        .collect()
}

/// Closest approach of `d0 + s (d1 - d0)` for `s` in `[0, 1]`.
fn segment_closest(d0: LocalPoint, d1: LocalPoint) -> (f64, f64) {
    let w = d1.sub(d0);
    let ww = w.dot(w);
    let s = if ww > 0.0 {
        (-d0.dot(w) / ww).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (s, d0.add(w.scale(s)).norm())
}

/// Distances within this of the radius count as contact.
pub const CONTACT_TOLERANCE_M: f64 = 1e-9;

/// Time to collision, seconds after the paths' common start, or `None` when
/// the agents stay farther apart than `collision_radius` over the horizon.
pub fn compute_ttc(
    a: &PredictedPath,
    b: &PredictedPath,
    collision_radius: f64,
) -> Result<Option<f64>> {
    check_aligned(a, b)?;
    let r = collision_radius + CONTACT_TOLERANCE_M;
    let d = relative(a, b);
    if d[0].norm() <= r {
        return Ok(Some(0.0));
    }
    for k in 0..d.len() - 1 {
        let (d0, d1) = (d[k], d[k + 1]);
        let (s_min, dist_min) = segment_closest(d0, d1);
        if dist_min > r {
            continue;
        }
        // Distance decreases monotonically on [0, s_min].
        let w = d1.sub(d0);
        let (mut lo, mut hi) = (0.0f64, s_min);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if d0.add(w.scale(mid)).norm() <= r {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-15 {
                break;
            }
        }
        return Ok(Some((k as f64 + hi) * a.step));
    }
    Ok(None)
}

/// Minimum separation over the horizon and the absolute time it occurs.
/// The earliest minimum wins ties.
pub fn min_predicted_distance(a: &PredictedPath, b: &PredictedPath) -> Result<(f64, f64)> {
    check_aligned(a, b)?;
    let d = relative(a, b);
    let mut best = (d[0].norm(), 0.0);
    for k in 0..d.len().saturating_sub(1) {
        let (s, dist) = segment_closest(d[k], d[k + 1]);
        if dist < best.0 {
            best = (dist, k as f64 + s);
        }
    }
    Ok((best.0, a.start() + best.1 * a.step))
}

/// Anything with timestamped planar positions.
pub trait TimedPath {
    fn timed_points(&self) -> Result<Vec<(f64, LocalPoint)>>;
}

impl TimedPath for PredictedPath {
    fn timed_points(&self) -> Result<Vec<(f64, LocalPoint)>> {
        Ok(self.samples.clone())
    }
}

impl TimedPath for Trajectory {
    fn timed_points(&self) -> Result<Vec<(f64, LocalPoint)>> {
        self.points()
            .iter()
            .map(|p| Ok((p.timestamp, p.planar()?)))
            .collect()
    }
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, x: usize, y: usize) {
        let (rx, ry) = (self.find(x), self.find(y));
        if rx != ry {
            self.0[rx.max(ry)] = rx.min(ry);
        }
    }
}

/// Index pairs `(i, j)` with `|a_i - b_j| <= radius`, found with a uniform
/// grid of cell size `radius`.
fn close_pairs(
    a: &[(f64, LocalPoint)],
    b: &[(f64, LocalPoint)],
    radius: f64,
) -> Vec<(usize, usize)> {
    let cell = if radius > 0.0 { radius } else { 1.0 };
    let key = |p: LocalPoint| {
        (
            (p.east / cell).floor() as i64,
            (p.north / cell).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (j, (_, p)) in b.iter().enumerate() {
        grid.entry(key(*p)).or_default().push(j);
    }
    let mut out = Vec::new();
    for (i, (_, p)) in a.iter().enumerate() {
        let (cx, cy) = key(*p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(js) = grid.get(&(cx + dx, cy + dy)) {
                    out.extend(
                        js.iter()
                            .filter(|&&j| p.distance(b[j].1) <= radius)
                            .map(|&j| (i, j)),
                    );
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Post-encroachment time: over all conflict zones, the smallest gap
/// between the two passage times. Close sample pairs sharing a sample of
/// either path form one zone. A zone's center is the midpoint of its
/// closest pair, and each path's passage time is that of its zone sample
/// nearest the center.
pub fn compute_pet<A: TimedPath + ?Sized, B: TimedPath + ?Sized>(
    a: &A,
    b: &B,
    conflict_radius: f64,
) -> Result<Option<f64>> {
    let (pa, pb) = (a.timed_points()?, b.timed_points()?);
    let pairs = close_pairs(&pa, &pb, conflict_radius);
    if pairs.is_empty() {
        return Ok(None);
    }
    let n = pa.len();
    let mut ds = DisjointSet((0..n + pb.len()).collect());
    for &(i, j) in &pairs {
        ds.union(i, n + j);
    }
    let mut zones: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    for &(i, j) in &pairs {
        zones.entry(ds.find(i)).or_default().push((i, j));
    }
    let mut pet = f64::INFINITY;
    for members in zones.values() {
        let &(ci, cj) = members
            .iter()
            .min_by(|&&(i1, j1), &&(i2, j2)| {
                let key = |i: usize, j: usize| {
                    (
                        pa[i].1.distance(pb[j].1),
                        (pa[i].0 - pb[j].0).abs(),
                        pa[i].0 + pb[j].0,
                    )
                };
                let (x, y) = (key(i1, j1), key(i2, j2));
                x.0.total_cmp(&y.0)
                    .then(x.1.total_cmp(&y.1))
                    .then(x.2.total_cmp(&y.2))
            })
            .expect("zone is non-empty");
        let center = pa[ci].1.add(pb[cj].1).scale(0.5);
        let passage = |pts: &[(f64, LocalPoint)], idx: &mut dyn Iterator<Item = usize>| {
            idx.map(|k| pts[k])
                .min_by(|x, y| {
                    x.1.distance(center)
                        .total_cmp(&y.1.distance(center))
                        .then(x.0.total_cmp(&y.0))
                })
                .map(|p| p.0)
                .expect("zone is non-empty")
        };
        let ta = passage(&pa, &mut members.iter().map(|m| m.0));
        let tb = passage(&pb, &mut members.iter().map(|m| m.1));
        pet = pet.min((ta - tb).abs());
    }
    Ok(Some(pet))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Caution,
    Critical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictEvent {
    pub pair: (String, String),
    /// When the prediction was made.
    pub timestamp: f64,
    pub ttc: Option<f64>,
    pub pet: Option<f64>,
    pub min_distance: f64,
    pub min_distance_time: f64,
    pub severity: Severity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    TtcBreach,
    PetBreach,
    GeofenceViolation,
}

impl WarningKind {
    /// Whether `value` breaches `threshold` for this kind: time metrics at
    /// or below it, geofence depth at or above it.
    pub fn violates(self, value: f64, threshold: f64) -> bool {
        match self {
            WarningKind::TtcBreach | WarningKind::PetBreach => value <= threshold,
            WarningKind::GeofenceViolation => value >= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarningRecord {
    pub timestamp: f64,
    pub kind: WarningKind,
    pub subject_ids: Vec<String>,
    pub metric_value: f64,
    pub threshold: f64,
    pub severity: Severity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub ttc_critical: f64,
    pub ttc_caution: f64,
    pub pet_caution: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            ttc_critical: 1.5,
            ttc_caution: 3.0,
            pet_caution: 2.0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.ttc_critical >= 0.0
            && self.ttc_critical <= self.ttc_caution
            && self.pet_caution >= 0.0)
        {
            return Err(Error::InvalidValue(format!(
                "thresholds need 0 <= ttc_critical <= ttc_caution and pet_caution >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn severity(&self, ttc: Option<f64>, pet: Option<f64>) -> Severity {
        match (ttc, pet) {
            (Some(t), _) if t <= self.ttc_critical => Severity::Critical,
            (Some(t), _) if t <= self.ttc_caution => Severity::Caution,
            (_, Some(p)) if p <= self.pet_caution => Severity::Caution,
            _ => Severity::Info,
        }
    }
}

/// Assigns severities, orders events by severity (highest first) then
/// ascending ttc, and emits a warning for every breached threshold.
/// Info-level events produce no warning.
pub fn rank_and_log(events: &[ConflictEvent], thresholds: &Thresholds) -> Vec<WarningRecord> {
    let mut ranked: Vec<ConflictEvent> = events
        .iter()
        .map(|e| ConflictEvent {
            severity: thresholds.severity(e.ttc, e.pet),
            ..e.clone()
        })
        .collect();
    ranked.sort_by(|x, y| {
        y.severity
            .cmp(&x.severity)
            .then(
                x.ttc
                    .unwrap_or(f64::INFINITY)
                    .total_cmp(&y.ttc.unwrap_or(f64::INFINITY)),
            )
            .then(
                x.pet
                    .unwrap_or(f64::INFINITY)
                    .total_cmp(&y.pet.unwrap_or(f64::INFINITY)),
            )
            .then(x.timestamp.total_cmp(&y.timestamp))
            .then_with(|| x.pair.cmp(&y.pair))
    });
    let mut out = Vec::new();
    for e in ranked {
        let subjects = vec![e.pair.0.clone(), e.pair.1.clone()];
        if let Some(t) = e.ttc.filter(|&t| t <= thresholds.ttc_caution) {
            let (threshold, severity) = if t <= thresholds.ttc_critical {
                (thresholds.ttc_critical, Severity::Critical)
            } else {
                (thresholds.ttc_caution, Severity::Caution)
            };
            out.push(WarningRecord {
                timestamp: e.timestamp,
                kind: WarningKind::TtcBreach,
                subject_ids: subjects.clone(),
                metric_value: t,
                threshold,
                severity,
            });
        }
        if let Some(p) = e.pet.filter(|&p| p <= thresholds.pet_caution) {
            out.push(WarningRecord {
                timestamp: e.timestamp,
                kind: WarningKind::PetBreach,
                subject_ids: subjects,
                metric_value: p,
                threshold: thresholds.pet_caution,
                severity: Severity::Caution,
            });
        }
    }
    out
}

/// A protected polygon, active over a closed time window.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Geofence {
    pub fence_id: String,
    /// Open ring; the closing edge is implied.
    pub polygon: Vec<LocalPoint>,
    pub active_window: (f64, f64),
    pub protected_classes: BTreeSet<ObjectClass>,
}

fn segments_intersect(p1: LocalPoint, p2: LocalPoint, q1: LocalPoint, q2: LocalPoint) -> bool {
    let orient = |a: LocalPoint, b: LocalPoint, c: LocalPoint| {
        let v = (b.east - a.east) * (c.north - a.north) - (b.north - a.north) * (c.east - a.east);
        if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            0
        }
    };
    let on = |a: LocalPoint, b: LocalPoint, c: LocalPoint| {
        c.east >= a.east.min(b.east)
            && c.east <= a.east.max(b.east)
            && c.north >= a.north.min(b.north)
            && c.north <= a.north.max(b.north)
    };
    let (o1, o2, o3, o4) = (
        orient(p1, p2, q1),
        orient(p1, p2, q2),
        orient(q1, q2, p1),
        orient(q1, q2, p2),
    );
    if o1 != o2 && o3 != o4 {
        return true;
    }
    (o1 == 0 && on(p1, p2, q1))
        || (o2 == 0 && on(p1, p2, q2))
        || (o3 == 0 && on(q1, q2, p1))
        || (o4 == 0 && on(q1, q2, p2))
}

fn distance_to_segment(p: LocalPoint, a: LocalPoint, b: LocalPoint) -> f64 {
    segment_closest(a.sub(p), b.sub(p)).1
}

impl Geofence {
    pub fn new(
        fence_id: impl Into<String>,
        polygon: Vec<LocalPoint>,
        active_window: (f64, f64),
        protected_classes: BTreeSet<ObjectClass>,
    ) -> Result<Self> {
        let fence_id = fence_id.into();
        let bad = |reason: String| Error::Geofence {
            fence_id: fence_id.clone(),
            reason,
        };
        let mut polygon = polygon;
        if polygon.len() > 1 && polygon.first() == polygon.last() {
            polygon.pop();
        }
        let n = polygon.len();
        if n < 3 {
            return Err(bad(format!("{n} vertices, need at least 3")));
        }
        if polygon
            .iter()
            .any(|p| !(p.east.is_finite() && p.north.is_finite()))
        {
            return Err(bad("non-finite vertex".into()));
        }
        let area2: f64 = (0..n)
            .map(|i| {
                let (a, b) = (polygon[i], polygon[(i + 1) % n]);
                a.east * b.north - b.east * a.north
            })
            .sum();
        if area2.abs() <= 1e-9 {
            return Err(bad("polygon has zero area".into()));
        }
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                let (a1, a2) = (polygon[i], polygon[(i + 1) % n]);
                let (b1, b2) = (polygon[j], polygon[(j + 1) % n]);
                if adjacent {
                    // Adjacent edges may only share their common vertex.
                    if a1 == a2 || b1 == b2 {
                        return Err(bad(format!("repeated vertex at index {i}")));
                    }
                    continue;
                }
                if segments_intersect(a1, a2, b1, b2) {
                    return Err(bad(format!("edges {i} and {j} intersect")));
                }
            }
        }
        let (w0, w1) = active_window;
        if !(w0 <= w1) {
            return Err(bad(format!("active window [{w0}, {w1}] is empty")));
        }
        Ok(Self {
            fence_id,
            polygon,
            active_window,
            protected_classes,
        })
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.active_window.0 && t <= self.active_window.1
    }

    /// Depth of `p` inside the polygon: distance to the nearest edge, zero
    /// on the boundary, `None` outside.
    pub fn depth(&self, p: LocalPoint) -> Option<f64> {
        let n = self.polygon.len();
        let edge_dist = (0..n)
            .map(|i| distance_to_segment(p, self.polygon[i], self.polygon[(i + 1) % n]))
            .fold(f64::INFINITY, f64::min);
        if edge_dist <= CONTACT_TOLERANCE_M {
            return Some(0.0);
        }
        let mut inside = false;
        for i in 0..n {
            let (a, b) = (self.polygon[i], self.polygon[(i + 1) % n]);
            if (a.north > p.north) != (b.north > p.north) {
                let x = a.east + (p.north - a.north) / (b.north - a.north) * (b.east - a.east);
                if p.east < x {
                    inside = !inside;
                }
            }
        }
        inside.then_some(edge_dist)
    }
}

/// Geofence as written in configuration files: the polygon is either a WKT
/// `POLYGON` or an array of `[east, north]` pairs.
#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct GeofenceSpec {
    pub fence_id: String,
    pub polygon: PolygonSpec,
    pub active_window: (f64, f64),
    #[serde(default)]
    pub protected_classes: BTreeSet<ObjectClass>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum PolygonSpec {
    Wkt(String),
    Coordinates(Vec<[f64; 2]>),
}

impl TryFrom<GeofenceSpec> for Geofence {
    type Error = Error;

    fn try_from(spec: GeofenceSpec) -> Result<Self> {
        let polygon = match spec.polygon {
            PolygonSpec::Wkt(text) => parse_wkt_polygon(&text).map_err(|e| Error::Geofence {
                fence_id: spec.fence_id.clone(),
                reason: e.to_string(),
            })?,
            PolygonSpec::Coordinates(c) => {
                c.into_iter().map(|[e, n]| LocalPoint::new(e, n)).collect()
            }
        };
        Geofence::new(
            spec.fence_id,
            polygon,
            spec.active_window,
            spec.protected_classes,
        )
    }
}

/// One warning per `(track, fence)` pair with the track inside an active
/// fence that does not protect its class. Input order is kept.
pub fn check_geofences(
    fences: &[Geofence],
    tracks: &[(String, TrackPoint)],
) -> Result<Vec<WarningRecord>> {
    let mut out = Vec::new();
    for (track_id, p) in tracks {
        let pos = p.planar()?;
        for f in fences {
            if f.protected_classes.contains(&p.object_class) || !f.is_active(p.timestamp) {
                continue;
            }
            if let Some(depth) = f.depth(pos) {
                out.push(WarningRecord {
                    timestamp: p.timestamp,
                    kind: WarningKind::GeofenceViolation,
                    subject_ids: vec![track_id.clone(), f.fence_id.clone()],
                    metric_value: depth,
                    threshold: 0.0,
                    severity: Severity::Critical,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    pub thresholds: Thresholds,
    pub collision_radius: f64,
    pub conflict_radius: f64,
    pub horizon_s: f64,
    pub step_s: f64,
    pub model: MotionModel,
    /// Spacing of the times at which every live pair is evaluated.
    pub eval_interval_s: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            collision_radius: 2.0,
            conflict_radius: 2.0,
            horizon_s: 5.0,
            step_s: 0.1,
            model: MotionModel::ConstantVelocity,
            eval_interval_s: 1.0,
        }
    }
}

/// Events and warnings from analyzing a set of tracks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Analysis {
    pub events: Vec<ConflictEvent>,
    /// Ranked conflict warnings followed by geofence warnings in time order.
    pub warnings: Vec<WarningRecord>,
}

/// Evaluates every pair of tracks alive at each multiple of
/// `eval_interval_s`, predicting from their states at that time, and checks
/// every track against the geofences at the same instants.
pub fn analyze_tracks(
    tracks: &[Trajectory],
    fences: &[Geofence],
    config: &SafetyConfig,
) -> Result<Analysis> {
    config.thresholds.validate()?;
    if !(config.eval_interval_s > 0.0) {
        return Err(Error::InvalidValue(
            "eval_interval_s must be positive".into(),
        ));
    }
    let spans: Vec<(f64, f64)> = tracks
        .iter()
        .filter_map(|t| Some((t.start_time()?, t.end_time()?)))
        .collect();
    if spans.is_empty() {
        return Ok(Analysis::default());
    }
    let t_min = spans.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let t_max = spans.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let k0 = (t_min / config.eval_interval_s - 1e-9).ceil() as i64;
    let k1 = (t_max / config.eval_interval_s + 1e-9).floor() as i64;

    let mut events = Vec::new();
    let mut fence_input = Vec::new();
    for k in k0..=k1 {
        let t = k as f64 * config.eval_interval_s;
        let mut live: Vec<(&Trajectory, PredictedPath)> = Vec::new();
        for tr in tracks {
            let Some(s) = tr.sample_at(t) else { continue };
            if s.nearest_dt > config.eval_interval_s {
                continue;
            }
            let mut history = Vec::with_capacity(2);
            if let Some(prev) = tr.sample_at(t - config.step_s) {
                history.push(MotionState::try_from(&prev.point)?);
            }
            let mut now = MotionState::try_from(&s.point)?;
            now.timestamp = t;
            history.push(now);
            fence_input.push((
                tr.track_id.clone(),
                TrackPoint {
                    timestamp: t,
                    ..s.point.clone()
                },
            ));
            if now.velocity.is_none() {
                continue;
            }
            let path = predict_path(
                tr.track_id.clone(),
                tr.dominant_class(),
                &history,
                config.horizon_s,
                config.step_s,
                config.model,
            )?;
            live.push((tr, path));
        }
        for i in 0..live.len() {
            for j in i + 1..live.len() {
                let (a, b) = (&live[i].1, &live[j].1);
                let ttc = compute_ttc(a, b, config.collision_radius)?;
                let pet = compute_pet(a, b, config.conflict_radius)?;
                let (min_distance, min_distance_time) = min_predicted_distance(a, b)?;
                events.push(ConflictEvent {
                    pair: (a.source_id.clone(), b.source_id.clone()),
                    timestamp: t,
                    ttc,
                    pet,
                    min_distance,
                    min_distance_time,
                    severity: config.thresholds.severity(ttc, pet),
                });
            }
        }
    }
    let mut warnings = rank_and_log(&events, &config.thresholds);
    warnings.extend(check_geofences(fences, &fence_input)?);
    Ok(Analysis { events, warnings })
}
