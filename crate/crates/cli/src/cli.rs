//! Arguments and subcommand bodies of the `roadtwin` binary.
//!
//! Every subcommand writes its artifacts into `--output-dir` and keeps
//! stdout to a short summary. Errors carry the stage that failed.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use roadtwin::calibration::LagSearch;
use roadtwin::geo::CalibrationConfig;
use roadtwin::model::{ClockSource, GeoPoint, ObjectClass, Trajectory};
use roadtwin::pipeline::{
    analyze_in_frame, calibrate_manifest, calibrate_sensor, fuse_from_config, load_dataset,
    load_geofences, read_json, read_tracks, run_pipeline, simulate_to_dir, validate_tracks,
    write_analysis, write_json, CalibrateOptions, CalibrationOutcome, PipelineConfig, RunMode,
    ValidationTarget, VALIDATION_FILE,
};
use roadtwin::records::DatasetMeta;
use roadtwin::safety::{SafetyConfig, Thresholds};
use roadtwin::simulator::SceneConfig;
use roadtwin::validation::ValidationOptions;
use roadtwin::{Error, Result};
use tokio::sync::RwLock;

use crate::server::{router, Session};

/// Per-sample validation errors, written with `validate --errors-csv`.
pub const VALIDATION_ERRORS_FILE: &str = "validation_errors.csv";

#[derive(Debug, Parser)]
#[command(
    name = "roadtwin",
    version,
    about = "Roadside sensor calibration, track fusion, GNSS validation and conflict analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: ground truth plus raw records per sensor.
    Simulate(SimulateArgs),
    /// Fit sensor extrinsics and clock lag against a reference trajectory.
    Calibrate(CalibrateArgs),
    /// Associate and fuse calibrated sensor tracks.
    Fuse(FuseArgs),
    /// Compare tracks with the trajectory of a GNSS-equipped test vehicle.
    Validate(ValidateArgs),
    /// Compute TTC, PET and geofence warnings for fused tracks.
    Analyze(AnalyzeArgs),
    /// Load, calibrate, fuse and analyze in one pass.
    Run(RunArgs),
    /// Serve the interactive calibration API.
    Serve(ServeArgs),
}

impl Command {
    /// Stage reported for errors that no inner stage claimed.
    pub fn stage(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Calibrate(_) => "calibrate",
            Command::Fuse(_) => "fuse",
            Command::Validate(_) => "validate",
            Command::Analyze(_) => "analyze",
            Command::Run(_) => "run",
            Command::Serve(_) => "serve",
        }
    }

    pub fn execute(self) -> Result<()> {
        let stage = self.stage();
        let result = match self {
            Command::Simulate(a) => simulate(a),
            Command::Calibrate(a) => calibrate(a),
            Command::Fuse(a) => fuse(a),
            Command::Validate(a) => validate(a),
            Command::Analyze(a) => analyze(a),
            Command::Run(a) => run(a),
            Command::Serve(a) => serve(a),
        };
        result.map_err(|e| {
            if e.stage_name().is_some() {
                e
            } else {
                Error::stage(stage)(e)
            }
        })
    }
}

/// `LAT,LON` in decimal degrees.
pub fn parse_origin(s: &str) -> std::result::Result<GeoPoint, String> {
    let (lat, lon) = s.split_once(',').ok_or("expected LAT,LON")?;
    let lat: f64 = lat.trim().parse().map_err(|e| format!("latitude: {e}"))?;
    let lon: f64 = lon.trim().parse().map_err(|e| format!("longitude: {e}"))?;
    GeoPoint::new(lat, lon).map_err(|e| e.to_string())
}

/// `START,END` in epoch seconds.
pub fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected START,END")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("start: {e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("end: {e}"))?;
    if a <= b {
        Ok((a, b))
    } else {
        Err(format!("window start {a} is after its end {b}"))
    }
}

fn parse_class(s: &str) -> std::result::Result<ObjectClass, String> {
    ObjectClass::parse(s).ok_or_else(|| format!("unknown object class `{s}`"))
}

fn parse_clock(s: &str) -> std::result::Result<ClockSource, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown clock source `{s}`"))
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene config JSON.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Simulation manifest; every listed sensor is calibrated against the
    /// ground truth and a pipeline config is written.
    #[arg(long, required_unless_present = "records", conflicts_with_all = ["records", "reference"])]
    pub manifest: Option<PathBuf>,
    /// Raw records of one sensor (JSON lines or CSV).
    #[arg(long, requires_all = ["reference", "sensor_id", "origin"])]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub sensor_id: Option<String>,
    /// Sensor origin as LAT,LON.
    #[arg(long, value_parser = parse_origin, allow_hyphen_values = true)]
    pub origin: Option<GeoPoint>,
    /// Clock source of the sensor: gnss or ntp.
    #[arg(long, value_parser = parse_clock, default_value = "ntp")]
    pub clock_source: ClockSource,
    /// WGS84 reference trajectories (JSON lines or CSV).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Track id of the reference; may be omitted when the reference file
    /// holds a single track.
    #[arg(long)]
    pub reference_id: Option<String>,
    /// Widest reference bracket for a correspondence, seconds.
    #[arg(long, default_value_t = 0.2)]
    pub max_dt: f64,
    /// Keep sensor timestamps as they are instead of estimating clock lag.
    #[arg(long)]
    pub no_lag: bool,
    /// Half-width of the lag search, seconds.
    #[arg(long, default_value_t = 1.0)]
    pub lag_window: f64,
    /// Lag search step, seconds.
    #[arg(long, default_value_t = 0.01)]
    pub lag_step: f64,
    #[arg(long)]
    pub output_dir: PathBuf,
}

impl CalibrateArgs {
    pub fn options(&self) -> CalibrateOptions {
        CalibrateOptions {
            max_dt: self.max_dt,
            lag_search: (!self.no_lag).then_some(LagSearch {
                window: self.lag_window,
                step: self.lag_step,
                ..LagSearch::default()
            }),
            ..CalibrateOptions::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Pipeline config listing records, calibrations and noise.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// WGS84 tracks to search, e.g. fused_tracks.jsonl.
    #[arg(long)]
    pub tracks: PathBuf,
    /// WGS84 GNSS trajectories of the test vehicle.
    #[arg(long)]
    pub gnss: PathBuf,
    /// Track id in the GNSS file; may be omitted for a single-track file.
    #[arg(long)]
    pub gnss_id: Option<String>,
    /// Identification window START,END; defaults to the GNSS time span.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<(f64, f64)>,
    /// Class of the test vehicle; defaults to the GNSS majority class.
    #[arg(long, value_parser = parse_class)]
    pub class: Option<ObjectClass>,
    /// Compare raw timestamps without removing the estimated lag.
    #[arg(long)]
    pub no_lag_correction: bool,
    /// Also write per-sample errors as CSV.
    #[arg(long)]
    pub errors_csv: bool,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// WGS84 fused tracks, e.g. fused_tracks.jsonl.
    #[arg(long)]
    pub tracks: PathBuf,
    /// Pipeline config supplying the frame origin, safety settings and
    /// geofences.
    #[arg(long, required_unless_present = "origin")]
    pub config: Option<PathBuf>,
    /// Origin of the analysis frame as LAT,LON.
    #[arg(long, value_parser = parse_origin, allow_hyphen_values = true)]
    pub origin: Option<GeoPoint>,
    /// Geofence JSON array; polygons in the analysis frame.
    #[arg(long)]
    pub geofences: Option<PathBuf>,
    /// Warning thresholds JSON.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Full safety settings JSON.
    #[arg(long)]
    pub safety: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Pipeline config.
    #[arg(long)]
    pub config: PathBuf,
    /// Replay records at this multiple of real time instead of the
    /// config's mode.
    #[arg(long)]
    pub replay_speed: Option<f64>,
    /// Process as fast as possible regardless of the config's mode.
    #[arg(long, conflicts_with = "replay_speed")]
    pub batch: bool,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Raw records of the sensor being calibrated.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub sensor_id: String,
    /// Sensor origin as LAT,LON; taken from `--calibration` when omitted.
    #[arg(long, value_parser = parse_origin, allow_hyphen_values = true, required_unless_present = "calibration")]
    pub origin: Option<GeoPoint>,
    /// Starting calibration.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, value_parser = parse_clock, default_value = "ntp")]
    pub clock_source: ClockSource,
    /// WGS84 reference trajectories for overlay and auto-fit.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub reference_id: Option<String>,
    /// Static UI bundle served for paths outside the API.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Saved calibrations go to `calibration_<sensor>.json` here.
    #[arg(long)]
    pub output_dir: PathBuf,
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let scene: SceneConfig = read_json(&a.scene).map_err(Error::stage("config"))?;
    let manifest = simulate_to_dir(&scene, &a.output_dir)?;
    println!(
        "simulated {} ground-truth tracks and {} sensors into {}",
        manifest
            .links
            .iter()
            .map(|l| &l.agent_id)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        manifest.sensors.len(),
        a.output_dir.display()
    );
    Ok(())
}

/// Picks `id` from `tracks`, or the only track when `id` is `None`.
fn pick_track(tracks: Vec<Trajectory>, id: Option<&str>, path: &Path) -> Result<Trajectory> {
    match id {
        Some(id) => tracks
            .into_iter()
            .find(|t| t.track_id == id)
            .ok_or_else(|| Error::NoCandidate(format!("no track `{id}` in {}", path.display()))),
        None if tracks.len() == 1 => Ok(tracks.into_iter().next().expect("one track")),
        None => Err(Error::InvalidValue(format!(
            "{} holds {} tracks; choose one by id",
            path.display(),
            tracks.len()
        ))),
    }
}

fn report_outcome(o: &CalibrationOutcome) {
    let c = &o.config;
    println!(
        "{}: azimuth {:.3} deg, offset north {:.3} m, east {:.3} m, clock lag {:.2} s, rmse {:.3} m over {} points",
        c.sensor_id, c.azimuth_deg, c.offset_north_m, c.offset_east_m, c.time_offset_s, o.alignment.rmse, o.alignment.n
    );
    if o.weak_geometry {
        eprintln!(
            "roadtwin: calibrate: warning: {} fit is weakly constrained (condition {:.4}); use a reference that turns",
            c.sensor_id, o.alignment.condition
        );
    }
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let options = a.options();
    if let Some(manifest) = &a.manifest {
        let id = a.reference_id.as_deref().ok_or_else(|| {
            Error::stage("config")(Error::InvalidValue(
                "--reference-id is required with --manifest".into(),
            ))
        })?;
        for o in calibrate_manifest(manifest, id, &options, &a.output_dir)? {
            report_outcome(&o);
        }
        return Ok(());
    }
    let (records, reference) = (
        a.records.as_ref().expect("clap requires records"),
        a.reference.as_ref().expect("clap requires reference"),
    );
    let meta = DatasetMeta {
        sensor_id: a.sensor_id.clone().expect("clap requires sensor id"),
        origin: a.origin.expect("clap requires origin"),
        clock_source: a.clock_source,
    };
    let (dataset, reference) = (|| {
        let ds = load_dataset(records, &meta)?;
        let r = pick_track(
            read_tracks(reference)?,
            a.reference_id.as_deref(),
            reference,
        )?;
        Ok((ds, r))
    })()
    .map_err(Error::stage("load"))?;
    let outcome = calibrate_sensor(&dataset, &reference, &options)?;
    std::fs::create_dir_all(&a.output_dir)
        .map_err(|source| Error::Io {
            path: a.output_dir.display().to_string(),
            source,
        })
        .and_then(|_| outcome.write(&a.output_dir))
        .map_err(Error::stage("write"))?;
    report_outcome(&outcome);
    Ok(())
}

fn fuse(a: FuseArgs) -> Result<()> {
    let config = PipelineConfig::load(&a.config).map_err(Error::stage("config"))?;
    let fused = fuse_from_config(&config, &a.output_dir)?;
    let states: usize = fused.tracks.iter().map(|t| t.states.len()).sum();
    println!(
        "fused {} tracks ({} states) into {}",
        fused.tracks.len(),
        states,
        a.output_dir.display()
    );
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<()> {
    let (tracks, gnss) = (|| {
        let tracks = read_tracks(&a.tracks)?;
        let gnss = pick_track(read_tracks(&a.gnss)?, a.gnss_id.as_deref(), &a.gnss)?;
        Ok((tracks, gnss))
    })()
    .map_err(Error::stage("load"))?;
    let target = ValidationTarget {
        correct_lag: !a.no_lag_correction,
        window: a.window,
        class: a.class,
    };
    let report = validate_tracks(&tracks, &gnss, &target, &ValidationOptions::default())?;
    (|| {
        std::fs::create_dir_all(&a.output_dir).map_err(|source| Error::Io {
            path: a.output_dir.display().to_string(),
            source,
        })?;
        write_json(&a.output_dir.join(VALIDATION_FILE), &report)?;
        if a.errors_csv {
            let path = a.output_dir.join(VALIDATION_ERRORS_FILE);
            let csv_err = |e: csv::Error| Error::InvalidValue(format!("{}: {e}", path.display()));
            let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
            for s in &report.samples {
                w.serialize(s).map_err(csv_err)?;
            }
            w.flush().map_err(|source| Error::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    })()
    .map_err(Error::stage("write"))?;
    println!(
        "track {} vs GNSS: rmse {:.3} m (lateral {:.3}, longitudinal {:.3}) over {} samples, lag {:.2} s, lane-level {}",
        report.matched_track_id,
        report.rmse,
        report.lateral_rmse,
        report.longitudinal_rmse,
        report.n_compared,
        report.estimated_lag,
        if report.lane_level_pass { "pass" } else { "fail" }
    );
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let (tracks, origin, fences, safety) = (|| {
        let config = a.config.as_deref().map(PipelineConfig::load).transpose()?;
        let origin = match (a.origin, &config) {
            (Some(o), _) => o,
            (None, Some(c)) => c.common_origin()?,
            (None, None) => unreachable!("clap requires --config or --origin"),
        };
        let mut safety = match (&a.safety, &config) {
            (Some(p), _) => read_json::<SafetyConfig>(p)?,
            (None, Some(c)) => c.safety.clone(),
            (None, None) => SafetyConfig::default(),
        };
        if let Some(p) = &a.thresholds {
            safety.thresholds = read_json::<Thresholds>(p)?;
        }
        let fence_file = a
            .geofences
            .clone()
            .or_else(|| config.and_then(|c| c.geofences));
        let fences = fence_file
            .as_deref()
            .map(load_geofences)
            .transpose()?
            .unwrap_or_default();
        Ok((read_tracks(&a.tracks)?, origin, fences, safety))
    })()
    .map_err(Error::stage("load"))?;
    let proj = roadtwin::geo::AeqdProjection::new(origin);
    let analysis =
        analyze_in_frame(&tracks, &fences, &safety, &proj).map_err(Error::stage("analyze"))?;
    write_analysis(&a.output_dir, &analysis).map_err(Error::stage("write"))?;
    println!(
        "{} conflict events, {} warnings from {} tracks",
        analysis.events.len(),
        analysis.warnings.len(),
        tracks.len()
    );
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut config = PipelineConfig::load(&a.config).map_err(Error::stage("config"))?;
    if let Some(speed) = a.replay_speed {
        config.mode = RunMode::Replay { speed };
    } else if a.batch {
        config.mode = RunMode::Batch;
    }
    let s = run_pipeline(&config, &a.output_dir)?;
    println!(
        "{} fused tracks, {} states ({} coasted), {} conflict events, {} warnings",
        s.fused_tracks, s.fused_states, s.coasted_states, s.conflict_events, s.warnings
    );
    Ok(())
}

/// Builds the session described by `a` without binding a socket.
pub fn build_session(a: &ServeArgs) -> Result<Session> {
    let initial = a
        .calibration
        .as_deref()
        .map(CalibrationConfig::load)
        .transpose()?;
    let origin = match (a.origin, &initial) {
        (Some(o), _) => o,
        (None, Some(c)) => c.origin()?,
        (None, None) => {
            return Err(Error::InvalidValue(
                "an origin or a calibration is required".into(),
            ))
        }
    };
    let meta = DatasetMeta {
        sensor_id: a.sensor_id.clone(),
        origin,
        clock_source: a.clock_source,
    };
    let dataset = load_dataset(&a.records, &meta)?;
    let reference = match &a.reference {
        Some(p) => Some(pick_track(read_tracks(p)?, a.reference_id.as_deref(), p)?),
        None => None,
    };
    let save_path = a
        .output_dir
        .join(format!("calibration_{}.json", a.sensor_id));
    Session::new(dataset, reference, initial, save_path)
}

fn serve(a: ServeArgs) -> Result<()> {
    let session = build_session(&a).map_err(Error::stage("load"))?;
    let app = router(Arc::new(RwLock::new(session)), a.static_dir.as_deref());
    let io = |source| Error::Io {
        path: a.bind.to_string(),
        source,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(io)?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.bind).await.map_err(io)?;
        eprintln!(
            "roadtwin: serving calibration API on http://{}",
            listener.local_addr().map_err(io)?
        );
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(io)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn arguments_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn origin_and_window_parse() {
        let o = parse_origin("40.8136,-96.7026").unwrap();
        assert_eq!((o.lat, o.lon), (40.8136, -96.7026));
        assert!(parse_origin("91,0").is_err());
        assert!(parse_origin("40.8").is_err());
        assert_eq!(parse_window("1,2").unwrap(), (1.0, 2.0));
        assert!(parse_window("2,1").is_err());
        assert_eq!(parse_clock("GNSS").unwrap(), ClockSource::Gnss);
        assert!(parse_class("tractor").is_err());
    }

    #[test]
    fn calibrate_modes_are_exclusive() {
        let parse =
            |args: &[&str]| Cli::try_parse_from(["roadtwin", "calibrate"].iter().chain(args));
        assert!(parse(&[
            "--manifest",
            "m.json",
            "--reference-id",
            "t",
            "--output-dir",
            "o"
        ])
        .is_ok());
        assert!(parse(&["--output-dir", "o"]).is_err());
        assert!(parse(&["--records", "r", "--output-dir", "o"]).is_err());
        assert!(parse(&[
            "--records",
            "r",
            "--sensor-id",
            "s",
            "--origin",
            "40,-96",
            "--reference",
            "g",
            "--output-dir",
            "o"
        ])
        .is_ok());
        assert!(parse(&["--manifest", "m", "--records", "r", "--output-dir", "o"]).is_err());
    }

    #[test]
    fn no_lag_disables_the_search() {
        let Command::Calibrate(a) = Cli::parse_from([
            "roadtwin",
            "calibrate",
            "--manifest",
            "m",
            "--no-lag",
            "--output-dir",
            "o",
        ])
        .command
        else {
            panic!("calibrate expected")
        };
        assert_eq!(a.options().lag_search, None);
    }
}
