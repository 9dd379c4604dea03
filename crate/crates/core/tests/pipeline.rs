use std::path::{Path, PathBuf};

use roadtwin::geo::{normalize_rad, CalibrationConfig};
use roadtwin::pipeline::{
    calibrate_manifest, read_json, read_tracks, run_pipeline_with, simulate_to_dir,
    validate_tracks, CalibrateOptions, PipelineConfig, RunMode, SensorInput, SimulationManifest,
    ValidationTarget, FUSED_TRACKS_FILE, GROUND_TRUTH_FILE, MANIFEST_FILE, PIPELINE_FILE,
    SUMMARY_FILE,
};
use roadtwin::simulator::SceneConfig;
use roadtwin::validation::ValidationOptions;
use roadtwin::Error;

fn scene() -> SceneConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/scene.json");
    read_json(&path).unwrap()
}

/// Simulates and calibrates the reference scene in `dir`.
fn prepare(dir: &Path) -> (SimulationManifest, PipelineConfig) {
    let manifest = simulate_to_dir(&scene(), dir).unwrap();
    calibrate_manifest(
        &dir.join(MANIFEST_FILE),
        "test-vehicle",
        &CalibrateOptions::default(),
        dir,
    )
    .unwrap();
    (
        manifest,
        PipelineConfig::load(&dir.join(PIPELINE_FILE)).unwrap(),
    )
}

fn no_sleep() -> impl FnMut(std::time::Duration) {
    |_| {}
}

fn read_all(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                PathBuf::from(p.file_name().unwrap()),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn calibration_recovers_injected_extrinsics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate_to_dir(&scene(), dir.path()).unwrap();
    let outcomes = calibrate_manifest(
        &dir.path().join(MANIFEST_FILE),
        "test-vehicle",
        &CalibrateOptions::default(),
        dir.path(),
    )
    .unwrap();
    for (outcome, expected) in outcomes.iter().zip(&manifest.expected_calibrations) {
        let got = outcome.config.transform();
        let want = expected.transform().with_center(got.rotation_center);
        let dtheta = normalize_rad(got.theta - want.theta).to_degrees();
        let dt = got.translation.distance(want.translation);
        let dlag = outcome.config.time_offset_s - expected.time_offset_s;
        eprintln!(
            "{}: dtheta {dtheta:.4} deg, dt {dt:.4} m, dlag {dlag:.4} s, n {}",
            expected.sensor_id, outcome.alignment.n
        );
        assert!(outcome.alignment.n >= 100);
        assert!(dtheta.abs() < 0.1 && dt < 0.1, "{}", expected.sensor_id);
        assert!(dlag.abs() <= 0.05);
        let link = manifest
            .links
            .iter()
            .find(|l| l.sensor_id == expected.sensor_id && l.agent_id == "test-vehicle")
            .unwrap();
        assert_eq!(
            outcome.config.matched_track_id.as_deref(),
            Some(link.track_id.as_str())
        );
    }
}

#[test]
fn full_run_fuses_one_track_per_agent() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = prepare(dir.path());
    let summary = run_pipeline_with(&config, dir.path(), &mut no_sleep()).unwrap();
    assert_eq!(summary.fused_tracks, 3);
    for s in &summary.sensors {
        let linked = manifest
            .links
            .iter()
            .filter(|l| l.sensor_id == s.sensor_id)
            .count();
        assert_eq!(s.tracks, linked);
    }
    let fused = read_tracks(&dir.path().join(FUSED_TRACKS_FILE)).unwrap();
    assert_eq!(fused.len(), 3);
    let gnss = read_tracks(&dir.path().join(GROUND_TRUTH_FILE)).unwrap();
    let tv = gnss.iter().find(|t| t.track_id == "test-vehicle").unwrap();
    let report = validate_tracks(
        &fused,
        tv,
        &ValidationTarget {
            correct_lag: true,
            ..Default::default()
        },
        &ValidationOptions::default(),
    )
    .unwrap();
    assert!(report.lane_level_pass);
    assert!(report.rmse < 0.5, "{report:?}");
}

#[test]
fn replay_matches_batch_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = prepare(dir.path());
    let batch = dir.path().join("batch");
    let replay = dir.path().join("replay");
    let summary = run_pipeline_with(&config, &batch, &mut no_sleep()).unwrap();
    let mut slept = std::time::Duration::ZERO;
    let paced = PipelineConfig {
        mode: RunMode::Replay { speed: 100.0 },
        ..config
    };
    run_pipeline_with(&paced, &replay, &mut |d| slept += d).unwrap();
    assert_eq!(read_all(&batch), read_all(&replay));
    let span = summary.data_end.unwrap() - summary.data_start.unwrap();
    assert!(
        (slept.as_secs_f64() - span / 100.0).abs() < 1e-3,
        "{slept:?} for {span} s"
    );
}

#[test]
fn runs_are_reproducible_across_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let (_, config) = prepare(d);
        run_pipeline_with(&config, d, &mut no_sleep()).unwrap();
    }
    assert_eq!(read_all(a.path()), read_all(b.path()));
}

#[test]
fn missing_calibration_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = prepare(dir.path());
    let text = std::fs::read_to_string(dir.path().join(PIPELINE_FILE)).unwrap();
    let broken = text.replace("calibration_lidar.json", "calibration_gone.json");
    std::fs::write(dir.path().join("broken.json"), broken).unwrap();
    let err = PipelineConfig::load(&dir.path().join("broken.json")).unwrap_err();
    assert!(
        matches!(err, Error::MissingFile(ref p) if p.ends_with("calibration_gone.json")),
        "{err}"
    );
    drop(config);
}

#[test]
fn empty_inputs_give_empty_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cal = CalibrationConfig {
        sensor_id: "lidar".into(),
        origin_lat: 40.0,
        origin_lon: -96.0,
        azimuth_deg: 0.0,
        offset_north_m: 0.0,
        offset_east_m: 0.0,
        rotation_center_east_m: 0.0,
        rotation_center_north_m: 0.0,
        time_offset_s: 0.0,
        matched_track_id: None,
    };
    cal.save(&dir.path().join("cal.json")).unwrap();
    std::fs::write(dir.path().join("lidar.jsonl"), "").unwrap();
    let config = PipelineConfig {
        sensors: vec![SensorInput {
            sensor_id: "lidar".into(),
            records: dir.path().join("lidar.jsonl"),
            calibration: dir.path().join("cal.json"),
            clock_source: Default::default(),
        }],
        ..serde_json::from_str(r#"{"sensors": []}"#).unwrap()
    };
    let out = dir.path().join("out");
    let summary = run_pipeline_with(&config, &out, &mut no_sleep()).unwrap();
    assert_eq!(summary.fused_tracks, 0);
    assert_eq!(std::fs::read(out.join(FUSED_TRACKS_FILE)).unwrap(), b"");
    assert!(out.join(SUMMARY_FILE).is_file());
}

#[test]
fn stage_errors_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = prepare(dir.path());
    std::fs::write(dir.path().join("lidar.jsonl"), "{\"ts\": 1.0}\n").unwrap();
    let err = run_pipeline_with(&config, &dir.path().join("out"), &mut no_sleep()).unwrap_err();
    assert_eq!(err.stage_name(), Some("load"));
    let msg = err.to_string();
    assert!(
        msg.starts_with("load: ") && msg.contains("lidar.jsonl") && msg.contains("line 1"),
        "{msg}"
    );
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cfg: PipelineConfig = read_json(&dir.join("pipeline.example.json")).unwrap();
    assert_eq!(cfg.mode, RunMode::Replay { speed: 20.0 });
    assert_eq!(cfg.sensors.len(), 2);
    let safety: roadtwin::safety::SafetyConfig = read_json(&dir.join("safety.json")).unwrap();
    assert_eq!(safety, roadtwin::safety::SafetyConfig::default());
    let thresholds: roadtwin::safety::Thresholds = read_json(&dir.join("thresholds.json")).unwrap();
    assert_eq!(thresholds, roadtwin::safety::Thresholds::default());
    roadtwin::pipeline::load_geofences(&dir.join("geofences.json")).unwrap();
}
