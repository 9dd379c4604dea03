//! File-level stages of the processing chain, and the full run that strings
//! them together.
//!
//! Raw sensor records stay in the sensor's own planar frame. Every other
//! interchange file (ground truth, GNSS, fused tracks) carries WGS84
//! `"lat,lon"` positions, so stages never need to agree on a projection
//! center. Outputs contain no wall-clock values: the same inputs give
//! byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    build_correspondences, estimate_time_offset, procrustes_align, select_best_candidate,
    AlignmentResult, LagSearch, DEFAULT_OVERLAP_PENALTY, WEAK_GEOMETRY_CONDITION,
};
use crate::error::{Error, Result};
use crate::fusion::{
    associate_tracks, fuse_all, FusedRecord, FusedTrack, FusionOptions, NoiseConfig, SensorNoise,
    SourceGap,
};
use crate::geo::{
    centroid, project_trajectory, unproject_trajectory, AeqdProjection, CalibrationConfig,
};
use crate::model::{ClockSource, GeoPoint, ObjectClass, Position, SensorDataset, Trajectory};
use crate::records::{load_sensor_records, write_records, DatasetMeta, RecordFormat};
use crate::safety::{analyze_tracks, Analysis, Geofence, GeofenceSpec, SafetyConfig, Severity};
use crate::simulator::{generate_scene, SceneConfig, TrackLink};
use crate::validation::{
    compare_to_ground_truth, identify_test_vehicle, ValidationOptions, ValidationReport,
};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FUSED_TRACKS_FILE: &str = "fused_tracks.jsonl";
pub const FUSED_STATES_FILE: &str = "fused_states.jsonl";
pub const FUSED_GAPS_FILE: &str = "fused_gaps.json";
pub const CONFLICTS_FILE: &str = "conflicts.jsonl";
pub const WARNINGS_FILE: &str = "warnings.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const VALIDATION_FILE: &str = "validation.json";
pub const PIPELINE_FILE: &str = "pipeline.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("serializable value");
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

/// Loads one sensor's record file. An empty file is an empty dataset.
pub fn load_dataset(path: &Path, meta: &DatasetMeta) -> Result<SensorDataset> {
    let text = read_text(path)?;
    match load_sensor_records(text.as_bytes(), RecordFormat::from_path(path), meta) {
        Err(Error::EmptyDataset) => SensorDataset::new(
            meta.sensor_id.clone(),
            meta.origin,
            Vec::new(),
            meta.clock_source,
        ),
        other => other.map_err(Error::in_file(path)),
    }
}

/// Loads every track of a record file, e.g. ground truth or fused tracks.
pub fn read_tracks(path: &Path) -> Result<Vec<Trajectory>> {
    let source = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("tracks")
        .to_string();
    let meta = DatasetMeta {
        sensor_id: source,
        origin: GeoPoint { lat: 0.0, lon: 0.0 },
        clock_source: ClockSource::Gnss,
    };
    Ok(load_dataset(path, &meta)?
        .trajectories
        .into_values()
        .collect())
}

pub fn write_tracks<'a>(
    path: &Path,
    tracks: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<()> {
    let mut out = Vec::new();
    write_records(&mut out, RecordFormat::from_path(path), tracks).map_err(io_err(path))?;
    write_bytes(path, &out)
}

/// Picks track `id` out of a record file.
pub fn read_track(path: &Path, id: &str) -> Result<Trajectory> {
    read_tracks(path)?
        .into_iter()
        .find(|t| t.track_id == id)
        .ok_or_else(|| Error::NoCandidate(format!("no track `{id}` in {}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn dir_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn is_plain_name(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSensor {
    pub sensor_id: String,
    pub origin: GeoPoint,
    pub clock_source: ClockSource,
    /// Relative to the manifest's directory.
    pub records: PathBuf,
}

/// What a simulation run wrote, plus the truths a calibration should find.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationManifest {
    pub seed: u64,
    pub origin: GeoPoint,
    pub start_time: f64,
    pub duration: f64,
    pub ground_truth: PathBuf,
    pub sensors: Vec<ManifestSensor>,
    pub links: Vec<TrackLink>,
    pub expected_calibrations: Vec<CalibrationConfig>,
}

impl SimulationManifest {
    /// Loads a manifest, making its file references absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Self = read_json(path)?;
        let base = dir_of(path);
        m.ground_truth = resolve(&base, &m.ground_truth);
        for s in &mut m.sensors {
            s.records = resolve(&base, &s.records);
        }
        Ok(m)
    }

    pub fn meta(sensor: &ManifestSensor) -> DatasetMeta {
        DatasetMeta {
            sensor_id: sensor.sensor_id.clone(),
            origin: sensor.origin,
            clock_source: sensor.clock_source,
        }
    }
}

/// Generates a scene and writes ground truth (WGS84), one record file per
/// sensor (sensor frame) and the manifest into `out`.
pub fn simulate_to_dir(config: &SceneConfig, out: &Path) -> Result<SimulationManifest> {
    for s in &config.sensors {
        if !is_plain_name(&s.sensor_id) {
            return Err(Error::SceneConfig(format!(
                "sensor id `{}` must use only letters, digits, `-` and `_`",
                s.sensor_id
            )));
        }
    }
    let scene = generate_scene(config)?;
    create_dir(out)?;
    let proj = AeqdProjection::new(config.origin);
    let truth = scene
        .ground_truth
        .iter()
        .map(|t| unproject_trajectory(t, &proj))
        .collect::<Result<Vec<_>>>()?;
    write_tracks(&out.join(GROUND_TRUTH_FILE), &truth)?;
    let mut sensors = Vec::new();
    for (model, ds) in config.sensors.iter().zip(&scene.sensors) {
        let name = PathBuf::from(format!("{}.jsonl", model.sensor_id));
        write_tracks(&out.join(&name), ds.trajectories.values())?;
        sensors.push(ManifestSensor {
            sensor_id: model.sensor_id.clone(),
            origin: model.origin,
            clock_source: model.clock_source,
            records: name,
        });
    }
    let manifest = SimulationManifest {
        seed: config.seed,
        origin: config.origin,
        start_time: config.start_time,
        duration: config.duration,
        ground_truth: PathBuf::from(GROUND_TRUTH_FILE),
        sensors,
        links: scene.links,
        expected_calibrations: config
            .sensors
            .iter()
            .map(|s| s.expected_calibration())
            .collect(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateOptions {
    /// Widest reference bracket accepted for a correspondence, seconds.
    pub max_dt: f64,
    pub overlap_penalty: f64,
    /// Clock-lag search; `None` keeps sensor timestamps as they are.
    pub lag_search: Option<LagSearch>,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        Self {
            max_dt: 0.2,
            overlap_penalty: DEFAULT_OVERLAP_PENALTY,
            lag_search: Some(LagSearch::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub config: CalibrationConfig,
    pub alignment: AlignmentResult,
    pub candidate_score: f64,
    /// False when the lag search was skipped or the lag was unobservable.
    pub lag_estimated: bool,
    /// The correspondences barely constrain the rotation.
    pub weak_geometry: bool,
}

/// Fit quality and parameters of one sensor calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub sensor_id: String,
    pub matched_track_id: Option<String>,
    pub n: usize,
    pub rmse: f64,
    pub yaw_deg: f64,
    pub offset_north_m: f64,
    pub offset_east_m: f64,
    pub time_offset_s: f64,
    pub lag_estimated: bool,
    pub condition: f64,
    pub weak_geometry: bool,
    pub candidate_score: f64,
}

impl CalibrationOutcome {
    pub fn report(&self) -> CalibrationReport {
        CalibrationReport {
            sensor_id: self.config.sensor_id.clone(),
            matched_track_id: self.config.matched_track_id.clone(),
            n: self.alignment.n,
            rmse: self.alignment.rmse,
            yaw_deg: self.alignment.yaw_deg,
            offset_north_m: self.config.offset_north_m,
            offset_east_m: self.config.offset_east_m,
            time_offset_s: self.config.time_offset_s,
            lag_estimated: self.lag_estimated,
            condition: self.alignment.condition,
            weak_geometry: self.weak_geometry,
            candidate_score: self.candidate_score,
        }
    }

    /// Writes `calibration_<sensor>.json` and its report next to it,
    /// returning the calibration file name.
    pub fn write(&self, dir: &Path) -> Result<String> {
        let id = &self.config.sensor_id;
        let name = format!("calibration_{id}.json");
        self.config.save(&dir.join(&name))?;
        write_json(
            &dir.join(format!("calibration_report_{id}.json")),
            &self.report(),
        )?;
        Ok(name)
    }
}

/// Finds the sensor track that best matches `reference` (any frame the
/// sensor origin can project), estimates its clock lag and fits the rigid
/// transform into the sensor's AEQD frame.
///
/// The written rotation center is the centroid of the matched sensor
/// points, so the offsets describe the shift of the data itself rather
/// than of a point possibly far from it.
pub fn calibrate_sensor(
    dataset: &SensorDataset,
    reference: &Trajectory,
    options: &CalibrateOptions,
) -> Result<CalibrationOutcome> {
    let proj = AeqdProjection::new(dataset.sensor_origin);
    let reference = project_trajectory(reference, &proj)?;
    let candidates: Vec<Trajectory> = dataset.trajectories.values().cloned().collect();
    if candidates.is_empty() {
        return Err(Error::NoCandidate(format!(
            "sensor {} has no tracks",
            dataset.sensor_id
        )));
    }
    let best = select_best_candidate(
        &candidates,
        &reference,
        options.max_dt,
        options.overlap_penalty,
    )?;
    let track = &dataset.trajectories[&best.track_id];
    let (lag, lag_estimated) = match &options.lag_search {
        None => (0.0, false),
        Some(search) => match estimate_time_offset(track, &reference, search) {
            Ok(est) => (est.lag, true),
            Err(Error::FlatObjective { .. } | Error::InsufficientOverlap(_)) => (0.0, false),
            Err(e) => return Err(e),
        },
    };
    let corr = build_correspondences(&track.time_shifted(-lag), &reference, options.max_dt)?;
    let alignment = procrustes_align(&corr)?;
    let transform = alignment.transform().with_center(centroid(&corr.a)?);
    let mut config = CalibrationConfig::from_transform(
        dataset.sensor_id.clone(),
        dataset.sensor_origin,
        &transform,
    );
    config.time_offset_s = lag;
    config.matched_track_id = Some(best.track_id.clone());
    Ok(CalibrationOutcome {
        weak_geometry: alignment.condition < WEAK_GEOMETRY_CONDITION,
        config,
        alignment,
        candidate_score: best.score,
        lag_estimated,
    })
}

/// Applies a sensor's calibration and re-projects its tracks into the
/// common AEQD frame of `proj`.
pub fn to_common_frame(
    dataset: &SensorDataset,
    calibration: &CalibrationConfig,
    proj: &AeqdProjection,
) -> Result<SensorDataset> {
    if calibration.sensor_id != dataset.sensor_id {
        return Err(Error::InvalidValue(format!(
            "calibration is for sensor `{}`, records are from `{}`",
            calibration.sensor_id, dataset.sensor_id
        )));
    }
    let tracks = dataset
        .trajectories
        .values()
        .map(|t| project_trajectory(&calibration.calibrate_trajectory(t)?, proj))
        .collect::<Result<Vec<_>>>()?;
    SensorDataset::new(
        dataset.sensor_id.clone(),
        dataset.sensor_origin,
        tracks,
        dataset.clock_source,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationOptions {
    /// Largest mean separation for two tracks to be the same object, meters.
    pub gate_distance_m: f64,
    /// Largest time difference for a sample pair to count, seconds.
    pub gate_dt_s: f64,
}

impl Default for AssociationOptions {
    fn default() -> Self {
        Self {
            gate_distance_m: 4.0,
            gate_dt_s: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub tracks: Vec<FusedTrack>,
    /// Majority class over every member point, per track.
    pub classes: Vec<ObjectClass>,
}

impl FusionOutput {
    /// Fused tracks as AEQD trajectories with velocities.
    pub fn trajectories(&self) -> Result<Vec<Trajectory>> {
        self.tracks
            .iter()
            .zip(&self.classes)
            .map(|(t, c)| t.to_trajectory(*c))
            .collect()
    }
}

/// Associates and fuses datasets already in one AEQD frame.
pub fn fuse_datasets(
    datasets: &[SensorDataset],
    noise: &NoiseConfig,
    fusion: &FusionOptions,
    association: &AssociationOptions,
) -> Result<FusionOutput> {
    let groups = associate_tracks(datasets, association.gate_distance_m, association.gate_dt_s)?;
    let tracks = fuse_all(&groups, noise, fusion)?;
    let classes = groups
        .iter()
        .map(|g| {
            let mut counts: BTreeMap<ObjectClass, usize> = BTreeMap::new();
            for p in g.members.iter().flat_map(|(_, t)| t.points()) {
                *counts.entry(p.object_class).or_default() += 1;
            }
            // Highest count; the first class in enum order wins ties.
            counts
                .into_iter()
                .rev()
                .max_by_key(|&(_, n)| n)
                .map(|(c, _)| c)
                .unwrap_or_default()
        })
        .collect();
    Ok(FusionOutput { tracks, classes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedGaps {
    pub fused_id: String,
    pub gaps: Vec<(f64, f64)>,
    pub source_gaps: Vec<SourceGap>,
    pub outages: Vec<(f64, f64)>,
}

/// Writes fused tracks (WGS84 records), per-state detail (AEQD of `proj`,
/// sigma, contributors) and gap intervals.
pub fn write_fusion(dir: &Path, output: &FusionOutput, proj: &AeqdProjection) -> Result<()> {
    create_dir(dir)?;
    let wgs = output
        .trajectories()?
        .iter()
        .map(|t| unproject_trajectory(t, proj))
        .collect::<Result<Vec<_>>>()?;
    write_tracks(&dir.join(FUSED_TRACKS_FILE), &wgs)?;
    let mut states: Vec<FusedRecord> = output.tracks.iter().flat_map(FusedTrack::records).collect();
    states.sort_by(|a, b| {
        a.ts.total_cmp(&b.ts)
            .then_with(|| a.fused_id.cmp(&b.fused_id))
    });
    write_jsonl(&dir.join(FUSED_STATES_FILE), &states)?;
    let gaps: Vec<FusedGaps> = output
        .tracks
        .iter()
        .map(|t| FusedGaps {
            fused_id: t.fused_id.clone(),
            gaps: t.gaps.clone(),
            source_gaps: t.source_gaps.clone(),
            outages: t.outages.clone(),
        })
        .collect();
    write_json(&dir.join(FUSED_GAPS_FILE), &gaps)
}

/// Which part of a GNSS run to validate against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationTarget {
    /// Remove the estimated clock lag before comparing.
    pub correct_lag: bool,
    /// Identification window; the GNSS time span when `None`.
    pub window: Option<(f64, f64)>,
    /// Class of the test vehicle; the GNSS majority class when `None`.
    pub class: Option<ObjectClass>,
}

/// Identifies the GNSS vehicle among WGS84 `tracks` and compares it with
/// the WGS84 GNSS trajectory. The comparison runs in an AEQD frame
/// centered on the first GNSS fix.
pub fn validate_tracks(
    tracks: &[Trajectory],
    gnss: &Trajectory,
    target: &ValidationTarget,
    options: &ValidationOptions,
) -> Result<ValidationReport> {
    let center = match gnss.points().first().map(|p| p.position) {
        Some(Position::Wgs84(g)) => g,
        Some(_) => {
            return Err(Error::FrameMismatch {
                expected: "wgs84 GNSS trajectory".into(),
                found: gnss.frame.to_string(),
            })
        }
        None => return Err(Error::EmptyInput),
    };
    let proj = AeqdProjection::new(center);
    let gnss_aeqd = project_trajectory(gnss, &proj)?;
    let aeqd = tracks
        .iter()
        .map(|t| project_trajectory(t, &proj))
        .collect::<Result<Vec<_>>>()?;
    let dataset = SensorDataset::new("tracks", center, aeqd, ClockSource::Ntp)?;
    let window = target.window.unwrap_or((
        gnss.start_time().unwrap_or(0.0),
        gnss.end_time().unwrap_or(0.0),
    ));
    let class = target.class.unwrap_or_else(|| gnss.dominant_class());
    let id = identify_test_vehicle(
        &dataset,
        &gnss_aeqd,
        window,
        class,
        options.lag_search.max_gap,
    )?;
    compare_to_ground_truth(
        &dataset.trajectories[&id.track_id],
        &gnss_aeqd,
        target.correct_lag,
        options,
    )
}

/// Reads a JSON array of geofences whose polygons are in the analysis frame.
pub fn load_geofences(path: &Path) -> Result<Vec<Geofence>> {
    let specs: Vec<GeofenceSpec> = read_json(path)?;
    specs
        .into_iter()
        .map(Geofence::try_from)
        .collect::<Result<Vec<_>>>()
        .map_err(Error::in_file(path))
}

pub fn write_analysis(dir: &Path, analysis: &Analysis) -> Result<()> {
    create_dir(dir)?;
    write_jsonl(&dir.join(CONFLICTS_FILE), &analysis.events)?;
    write_jsonl(&dir.join(WARNINGS_FILE), &analysis.warnings)
}

/// Projects tracks into the frame of `proj` and runs the safety analysis.
pub fn analyze_in_frame(
    tracks: &[Trajectory],
    fences: &[Geofence],
    config: &SafetyConfig,
    proj: &AeqdProjection,
) -> Result<Analysis> {
    let aeqd = tracks
        .iter()
        .map(|t| project_trajectory(t, proj))
        .collect::<Result<Vec<_>>>()?;
    analyze_tracks(&aeqd, fences, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorInput {
    pub sensor_id: String,
    pub records: PathBuf,
    pub calibration: PathBuf,
    #[serde(default)]
    pub clock_source: ClockSource,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Process everything as fast as possible.
    #[default]
    Batch,
    /// Feed records in timestamp order, `speed` times faster than real time.
    Replay { speed: f64 },
}

fn default_rate() -> f64 {
    10.0
}

fn default_timeout() -> f64 {
    FusionOptions::default().track_timeout_s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Center of the common frame; defaults to the first sensor's origin.
    #[serde(default)]
    pub origin: Option<GeoPoint>,
    pub sensors: Vec<SensorInput>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub association: AssociationOptions,
    /// Fused output rate.
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    #[serde(default = "default_timeout")]
    pub track_timeout_s: f64,
    #[serde(default)]
    pub safety: SafetyConfig,
    /// JSON array of geofences in the common frame.
    #[serde(default)]
    pub geofences: Option<PathBuf>,
    #[serde(default)]
    pub mode: RunMode,
}

impl PipelineConfig {
    /// Loads a config, resolving paths against its directory, and checks it.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_json(path)?;
        let base = dir_of(path);
        for s in &mut cfg.sensors {
            s.records = resolve(&base, &s.records);
            s.calibration = resolve(&base, &s.calibration);
        }
        cfg.geofences = cfg.geofences.map(|g| resolve(&base, &g));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.sensors {
            if !ids.insert(s.sensor_id.as_str()) {
                return Err(Error::InvalidValue(format!(
                    "sensor `{}` is listed twice",
                    s.sensor_id
                )));
            }
            for p in [&s.records, &s.calibration] {
                if !p.is_file() {
                    return Err(Error::MissingFile(p.display().to_string()));
                }
            }
        }
        if let Some(g) = &self.geofences {
            if !g.is_file() {
                return Err(Error::MissingFile(g.display().to_string()));
            }
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "rate_hz must be positive, got {}",
                self.rate_hz
            )));
        }
        if let RunMode::Replay { speed } = self.mode {
            if !(speed > 0.0 && speed.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "replay speed must be positive, got {speed}"
                )));
            }
        }
        self.noise.validate()?;
        self.safety.thresholds.validate()
    }

    /// Center of the common frame: `origin`, else the origin in the first
    /// sensor's calibration.
    pub fn common_origin(&self) -> Result<GeoPoint> {
        match (self.origin, self.sensors.first()) {
            (Some(o), _) => Ok(o),
            (None, Some(s)) => CalibrationConfig::load(&s.calibration)?.origin(),
            (None, None) => Err(Error::InvalidValue("no sensors and no origin".into())),
        }
    }

    pub fn fusion_options(&self) -> FusionOptions {
        FusionOptions {
            output_rate_hz: self.rate_hz,
            track_timeout_s: self.track_timeout_s,
            ..FusionOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSummary {
    pub sensor_id: String,
    pub tracks: usize,
    pub points: usize,
}

/// Counts describing a run. Times are data timestamps, never wall clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub origin: GeoPoint,
    pub sensors: Vec<SensorSummary>,
    pub fused_tracks: usize,
    pub fused_states: usize,
    /// States with no contributing measurement.
    pub coasted_states: usize,
    pub conflict_events: usize,
    pub warnings: usize,
    pub warnings_by_severity: BTreeMap<Severity, usize>,
    pub data_start: Option<f64>,
    pub data_end: Option<f64>,
}

/// Sleeps between consecutive record timestamps, scaled by `speed`.
fn pace(datasets: &[SensorDataset], speed: f64, sleep: &mut dyn FnMut(Duration)) {
    let mut stamps: Vec<f64> = datasets
        .iter()
        .flat_map(|d| d.trajectories.values())
        .flat_map(|t| t.points().iter().map(|p| p.timestamp))
        .collect();
    stamps.sort_by(f64::total_cmp);
    for w in stamps.windows(2) {
        let dt = (w[1] - w[0]) / speed;
        if dt > 0.0 {
            sleep(Duration::from_secs_f64(dt));
        }
    }
}

/// Sensor inputs loaded and mapped into the common frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInputs {
    /// Center of the common AEQD frame.
    pub origin: GeoPoint,
    /// Raw datasets with their calibrations, in config order.
    pub loaded: Vec<(SensorDataset, CalibrationConfig)>,
    /// Calibrated datasets in the common frame.
    pub common: Vec<SensorDataset>,
}

/// Validates the config, loads every sensor and applies its calibration.
pub fn prepare_inputs(config: &PipelineConfig) -> Result<PreparedInputs> {
    config.validate().map_err(Error::stage("config"))?;

    let loaded = config
        .sensors
        .iter()
        .map(|s| {
            let cal = CalibrationConfig::load(&s.calibration)?;
            if cal.sensor_id != s.sensor_id {
                return Err(Error::in_file(&s.calibration)(Error::InvalidValue(
                    format!(
                        "calibration is for sensor `{}`, expected `{}`",
                        cal.sensor_id, s.sensor_id
                    ),
                )));
            }
            let meta = DatasetMeta {
                sensor_id: s.sensor_id.clone(),
                origin: cal.origin()?,
                clock_source: s.clock_source,
            };
            Ok((load_dataset(&s.records, &meta)?, cal))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(Error::stage("load"))?;

    let origin = match (config.origin, loaded.first()) {
        (Some(o), _) => o,
        (None, Some((ds, _))) => ds.sensor_origin,
        (None, None) => {
            return Err(Error::stage("config")(Error::InvalidValue(
                "no sensors and no origin".into(),
            )))
        }
    };
    let proj = AeqdProjection::new(origin);
    let common = loaded
        .iter()
        .map(|(ds, cal)| {
            to_common_frame(ds, cal, &proj).map_err(|e| Error::InFile {
                path: ds.sensor_id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(Error::stage("calibrate"))?;
    Ok(PreparedInputs {
        origin,
        loaded,
        common,
    })
}

/// Loads, calibrates and fuses, writing only the fusion artifacts.
pub fn fuse_from_config(config: &PipelineConfig, out: &Path) -> Result<FusionOutput> {
    let prepared = prepare_inputs(config)?;
    let fused = fuse_datasets(
        &prepared.common,
        &config.noise,
        &config.fusion_options(),
        &config.association,
    )
    .map_err(Error::stage("fuse"))?;
    write_fusion(out, &fused, &AeqdProjection::new(prepared.origin))
        .map_err(Error::stage("write"))?;
    Ok(fused)
}

/// Runs load, calibration, fusion and safety analysis, writing every
/// artifact into `out`. `sleep` is only called in replay mode.
pub fn run_pipeline_with(
    config: &PipelineConfig,
    out: &Path,
    sleep: &mut dyn FnMut(Duration),
) -> Result<RunSummary> {
    let PreparedInputs {
        origin,
        loaded,
        common,
    } = prepare_inputs(config)?;

    if let RunMode::Replay { speed } = config.mode {
        pace(&common, speed, sleep);
    }

    let fused = fuse_datasets(
        &common,
        &config.noise,
        &config.fusion_options(),
        &config.association,
    )
    .map_err(Error::stage("fuse"))?;

    let analysis = (|| {
        let fences = match &config.geofences {
            Some(p) => load_geofences(p)?,
            None => Vec::new(),
        };
        analyze_tracks(&fused.trajectories()?, &fences, &config.safety)
    })()
    .map_err(Error::stage("analyze"))?;

    let all_stamps = || {
        common
            .iter()
            .flat_map(|d| d.trajectories.values())
            .flat_map(|t| t.points().iter().map(|p| p.timestamp))
    };
    let mut by_severity = BTreeMap::new();
    for w in &analysis.warnings {
        *by_severity.entry(w.severity).or_insert(0) += 1;
    }
    let summary = RunSummary {
        origin,
        sensors: loaded
            .iter()
            .map(|(ds, _)| SensorSummary {
                sensor_id: ds.sensor_id.clone(),
                tracks: ds.trajectories.len(),
                points: ds.point_count(),
            })
            .collect(),
        fused_tracks: fused.tracks.len(),
        fused_states: fused.tracks.iter().map(|t| t.states.len()).sum(),
        coasted_states: fused
            .tracks
            .iter()
            .flat_map(|t| &t.contributors)
            .filter(|c| c.is_empty())
            .count(),
        conflict_events: analysis.events.len(),
        warnings: analysis.warnings.len(),
        warnings_by_severity: by_severity,
        data_start: all_stamps().min_by(f64::total_cmp),
        data_end: all_stamps().max_by(f64::total_cmp),
    };

    (|| {
        write_fusion(out, &fused, &AeqdProjection::new(origin))?;
        write_analysis(out, &analysis)?;
        write_json(&out.join(SUMMARY_FILE), &summary)
    })()
    .map_err(Error::stage("write"))?;
    Ok(summary)
}

/// [`run_pipeline_with`] using real sleeps for replay pacing.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<RunSummary> {
    run_pipeline_with(config, out, &mut std::thread::sleep)
}

/// Floor for noise estimated from calibration residuals, meters.
pub const MIN_POSITION_SIGMA: f64 = 0.05;

/// `path` as written into a config stored in `dir`: relative to `dir`, so
/// run directories stay relocatable, unless the two share nothing below
/// the filesystem root.
fn relative_to(path: &Path, dir: &Path) -> Result<PathBuf> {
    let canonical = |p: &Path| std::fs::canonicalize(p).map_err(io_err(p));
    let (file, base) = (canonical(path)?, canonical(dir)?);
    let common = file
        .components()
        .zip(base.components())
        .take_while(|(a, b)| a == b)
        .count();
    if common <= 1 {
        return Ok(file);
    }
    let mut out = PathBuf::new();
    for _ in base.components().skip(common) {
        out.push("..");
    }
    out.extend(file.components().skip(common));
    Ok(out)
}

/// Calibrates every sensor of a simulation against ground-truth track
/// `reference_id`, writes `calibration_<sensor>.json` files and a
/// [`PipelineConfig`] that references them, with per-sensor noise taken
/// from the fit residuals.
pub fn calibrate_manifest(
    manifest_path: &Path,
    reference_id: &str,
    options: &CalibrateOptions,
    out: &Path,
) -> Result<Vec<CalibrationOutcome>> {
    let manifest = SimulationManifest::load(manifest_path).map_err(Error::stage("load"))?;
    let reference =
        read_track(&manifest.ground_truth, reference_id).map_err(Error::stage("load"))?;
    create_dir(out).map_err(Error::stage("write"))?;
    let mut outcomes = Vec::new();
    let mut inputs = Vec::new();
    let mut noise = NoiseConfig::default();
    for s in &manifest.sensors {
        let ds =
            load_dataset(&s.records, &SimulationManifest::meta(s)).map_err(Error::stage("load"))?;
        let outcome = calibrate_sensor(&ds, &reference, options)
            .map_err(|e| Error::InFile {
                path: s.sensor_id.clone(),
                source: Box::new(e),
            })
            .map_err(Error::stage("calibrate"))?;
        let name = outcome.write(out).map_err(Error::stage("write"))?;
        inputs.push(SensorInput {
            sensor_id: s.sensor_id.clone(),
            records: relative_to(&s.records, out).map_err(Error::stage("write"))?,
            calibration: PathBuf::from(name),
            clock_source: s.clock_source,
        });
        // Residuals of a 2-D fit have rms sqrt(2) sigma under isotropic noise.
        noise.sensors.insert(
            s.sensor_id.clone(),
            SensorNoise {
                position_sigma: (outcome.alignment.rmse / std::f64::consts::SQRT_2)
                    .max(MIN_POSITION_SIGMA),
                velocity_sigma: None,
            },
        );
        outcomes.push(outcome);
    }
    let pipeline = PipelineConfig {
        origin: Some(manifest.origin),
        sensors: inputs,
        noise,
        association: AssociationOptions::default(),
        rate_hz: default_rate(),
        track_timeout_s: default_timeout(),
        safety: SafetyConfig::default(),
        geofences: None,
        mode: RunMode::Batch,
    };
    write_json(&out.join(PIPELINE_FILE), &pipeline).map_err(Error::stage("write"))?;
    Ok(outcomes)
}
