mod common;

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use roadtwin::geo::{heading_azimuth_deg, normalize_deg, AeqdProjection, CalibrationConfig};
use roadtwin::model::LocalPoint;
use roadtwin::pipeline::{load_dataset, SimulationManifest};
use roadtwin_cli::cli::{build_session, ServeArgs};
use roadtwin_cli::server::{router, Session};
use serde_json::{json, Value};
use tokio::sync::RwLock;
use tower::ServiceExt;

use common::{reference_track, simulate, validate_feature_collection};

const SENSOR: &str = "lidar";

fn serve_args(m: &SimulationManifest, out: &Path, calibration: Option<&Path>) -> ServeArgs {
    let s = m.sensors.iter().find(|s| s.sensor_id == SENSOR).unwrap();
    ServeArgs {
        records: s.records.clone(),
        sensor_id: SENSOR.into(),
        origin: Some(s.origin),
        calibration: calibration.map(Path::to_path_buf),
        clock_source: s.clock_source,
        reference: Some(m.ground_truth.clone()),
        reference_id: Some("test-vehicle".into()),
        static_dir: None,
        bind: "127.0.0.1:0".parse().unwrap(),
        output_dir: out.to_path_buf(),
    }
}

fn app(session: Session) -> Router {
    router(Arc::new(RwLock::new(session)), None)
}

/// Sends one request and returns the status and the JSON body, which must
/// be an RFC 7946 FeatureCollection served as JSON.
async fn call(
    app: &Router,
    method: Method,
    path: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(path)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let content_type = res.headers()[header::CONTENT_TYPE]
        .to_str()
        .unwrap()
        .to_owned();
    assert_eq!(content_type, "application/json", "{path}");
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    if let Err(e) = validate_feature_collection(&v) {
        panic!("{method_path}: invalid GeoJSON: {e}", method_path = path);
    }
    (status, v)
}

fn coordinates(fc: &Value) -> Vec<Vec<[f64; 2]>> {
    fc["features"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| {
            let g = &f["geometry"];
            let pts = match g["type"].as_str().unwrap() {
                "Point" => vec![g["coordinates"].clone()],
                _ => g["coordinates"].as_array().unwrap().clone(),
            };
            pts.iter()
                .map(|p| [p[0].as_f64().unwrap(), p[1].as_f64().unwrap()])
                .collect()
        })
        .collect()
}

fn assert_same_geometry(a: &[Vec<[f64; 2]>], b: &[Vec<[f64; 2]>], tol_deg: f64) {
    assert_eq!(a.len(), b.len());
    for (ta, tb) in a.iter().zip(b) {
        assert_eq!(ta.len(), tb.len());
        for (p, q) in ta.iter().zip(tb) {
            assert!(
                (p[0] - q[0]).abs() <= tol_deg && (p[1] - q[1]).abs() <= tol_deg,
                "{p:?} vs {q:?}"
            );
        }
    }
}

#[tokio::test]
async fn identity_transform_returns_the_untransformed_projection() {
    let dir = tempfile::tempdir().unwrap();
    let m = simulate(&dir.path().join("sim"));
    let args = serve_args(&m, &dir.path().join("out"), None);
    let app = app(build_session(&args).unwrap());

    let body = json!({ "azimuth_deg": 0.0, "offset_north_m": 0.0, "offset_east_m": 0.0 });
    let (status, fc) = call(&app, Method::POST, "/transform", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fc["parameters"]["dirty"], true);

    // Raw sensor coordinates read as AEQD offsets from the sensor origin.
    let s = m.sensors.iter().find(|s| s.sensor_id == SENSOR).unwrap();
    let raw = load_dataset(&s.records, &SimulationManifest::meta(s)).unwrap();
    let proj = AeqdProjection::new(s.origin);
    let expected: Vec<Vec<[f64; 2]>> = raw
        .trajectories
        .values()
        .map(|t| {
            t.planar_points()
                .unwrap()
                .into_iter()
                .map(|p| {
                    let g = proj.inverse(p);
                    [g.lon, g.lat]
                })
                .collect()
        })
        .collect();
    // 1e-12 deg is about 0.1 micrometers.
    assert_same_geometry(&coordinates(&fc), &expected, 1e-12);
    let ids: Vec<&str> = fc["features"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["properties"]["track_id"].as_str().unwrap())
        .collect();
    assert_eq!(
        ids,
        raw.trajectories
            .keys()
            .map(String::as_str)
            .collect::<Vec<_>>()
    );

    let (_, fresh) = call(&app, Method::GET, "/trajectories", None).await;
    assert_eq!(fresh["features"], fc["features"]);
}

#[tokio::test]
async fn auto_fit_recovers_the_injected_extrinsics() {
    let dir = tempfile::tempdir().unwrap();
    let m = simulate(&dir.path().join("sim"));
    let app = app(build_session(&serve_args(&m, &dir.path().join("out"), None)).unwrap());

    let (status, fc) = call(&app, Method::POST, "/auto", None).await;
    assert_eq!(status, StatusCode::OK, "{fc}");
    let p = &fc["parameters"];
    let center = LocalPoint::new(
        p["rotation_center_east_m"].as_f64().unwrap(),
        p["rotation_center_north_m"].as_f64().unwrap(),
    );
    let truth = m
        .expected_calibrations
        .iter()
        .find(|c| c.sensor_id == SENSOR)
        .unwrap();
    let expected = truth.transform().with_center(center);

    let az_err =
        normalize_deg(p["azimuth_deg"].as_f64().unwrap() - heading_azimuth_deg(expected.theta))
            .abs();
    let offset_err = LocalPoint::new(
        p["offset_east_m"].as_f64().unwrap(),
        p["offset_north_m"].as_f64().unwrap(),
    )
    .distance(expected.translation);
    assert!(az_err < 0.1, "azimuth error {az_err} deg");
    assert!(offset_err < 0.1, "offset error {offset_err} m");
    // Lidar samples at 20 Hz.
    assert!((p["time_offset_s"].as_f64().unwrap() - truth.time_offset_s).abs() <= 0.05);
    assert_eq!(p["dirty"], true);

    let fit = &fc["fit"];
    assert_eq!(fit["sensor_id"], SENSOR);
    assert!(fit["n"].as_u64().unwrap() >= 100);
    assert!(fit["rmse"].as_f64().unwrap() < 1.0);
    assert!(fit["condition"].as_f64().is_some());

    // The fitted overlay lies on the reference: every sensor point of the
    // matched track is within a few sigma of the GNSS path.
    let matched = fit["matched_track_id"].as_str().unwrap();
    let reference = reference_track(&m);
    let proj = AeqdProjection::new(m.origin);
    let path: Vec<LocalPoint> = reference
        .points()
        .iter()
        .map(|q| match q.position {
            roadtwin::model::Position::Wgs84(g) => proj.forward(g).unwrap(),
            _ => unreachable!(),
        })
        .collect();
    let feature = fc["features"]
        .as_array()
        .unwrap()
        .iter()
        .find(|f| f["properties"]["track_id"] == matched)
        .unwrap();
    for c in feature["geometry"]["coordinates"].as_array().unwrap() {
        let g =
            roadtwin::model::GeoPoint::new(c[1].as_f64().unwrap(), c[0].as_f64().unwrap()).unwrap();
        let q = proj.forward(g).unwrap();
        let d = path
            .iter()
            .map(|r| r.distance(q))
            .fold(f64::INFINITY, f64::min);
        assert!(d < 2.5, "fitted point {d} m from the reference");
    }
}

#[tokio::test]
async fn save_refuses_to_overwrite_and_persists_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let m = simulate(&dir.path().join("sim"));
    let out = dir.path().join("out");
    let app = app(build_session(&serve_args(&m, &out, None)).unwrap());

    let body = json!({ "azimuth_deg": 185.0, "offset_north_m": -92.0, "offset_east_m": 28.0 });
    let (_, edited) = call(&app, Method::POST, "/transform", Some(body)).await;

    let (status, saved) = call(&app, Method::POST, "/save", None).await;
    assert_eq!(status, StatusCode::OK);
    let path = out.join(format!("calibration_{SENSOR}.json"));
    assert_eq!(saved["saved_to"], path.display().to_string());
    assert_eq!(saved["parameters"]["dirty"], false);
    assert!(saved["features"].as_array().unwrap().is_empty());

    let (status, refused) = call(&app, Method::POST, "/save", Some(json!({}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(refused["error"]["field"], "overwrite");
    let (status, _) = call(
        &app,
        Method::POST,
        "/save",
        Some(json!({ "overwrite": true })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);

    let cfg = CalibrationConfig::load(&path).unwrap();
    assert_eq!(
        (cfg.azimuth_deg, cfg.offset_north_m, cfg.offset_east_m),
        (185.0, -92.0, 28.0)
    );

    // A new session started from the saved file shows the same overlay.
    let reloaded = app_from(&m, &out, &path);
    let (_, again) = call(&reloaded, Method::GET, "/trajectories", None).await;
    assert_eq!(again["parameters"]["dirty"], false);
    for key in ["azimuth_deg", "offset_north_m", "offset_east_m"] {
        assert!(
            (again["parameters"][key].as_f64().unwrap()
                - edited["parameters"][key].as_f64().unwrap())
            .abs()
                < 1e-9
        );
    }
    assert_same_geometry(&coordinates(&again), &coordinates(&edited), 1e-12);
}

fn app_from(m: &SimulationManifest, out: &Path, calibration: &Path) -> Router {
    app(build_session(&serve_args(m, out, Some(calibration))).unwrap())
}

#[tokio::test]
async fn malformed_bodies_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let m = simulate(&dir.path().join("sim"));
    let app = app(build_session(&serve_args(&m, &dir.path().join("out"), None)).unwrap());

    let cases = [
        (
            json!({ "offset_north_m": 0, "offset_east_m": 0 }),
            "azimuth_deg",
        ),
        (
            json!({ "azimuth_deg": 10, "offset_north_m": "north", "offset_east_m": 0 }),
            "offset_north_m",
        ),
        (
            json!({ "azimuth_deg": 10, "offset_north_m": 0, "offset_east_m": null }),
            "offset_east_m",
        ),
        (json!([185, -92, 28]), "body"),
    ];
    for (body, field) in cases {
        let (status, fc) = call(&app, Method::POST, "/transform", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(fc["error"]["field"], field);
    }
    let (status, fc) = call(
        &app,
        Method::POST,
        "/save",
        Some(json!({ "overwrite": "yes" })),
    )
    .await;
    assert_eq!(
        (status, fc["error"]["field"].as_str()),
        (StatusCode::BAD_REQUEST, Some("overwrite"))
    );

    // Rejected edits leave the session untouched.
    let (_, fc) = call(&app, Method::GET, "/trajectories", None).await;
    assert_eq!(fc["parameters"]["dirty"], false);
}

#[tokio::test]
async fn reference_is_served_and_required_for_auto() {
    let dir = tempfile::tempdir().unwrap();
    let m = simulate(&dir.path().join("sim"));
    let app_with = app(build_session(&serve_args(&m, &dir.path().join("out"), None)).unwrap());
    let (status, fc) = call(&app_with, Method::GET, "/reference", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fc["features"][0]["properties"]["role"], "reference");
    assert_eq!(fc["features"][0]["properties"]["track_id"], "test-vehicle");
    assert_eq!(coordinates(&fc)[0].len(), reference_track(&m).len());

    let mut args = serve_args(&m, &dir.path().join("out"), None);
    args.reference = None;
    let app_without = app(build_session(&args).unwrap());
    let (status, _) = call(&app_without, Method::GET, "/reference", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, fc) = call(&app_without, Method::POST, "/auto", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(fc["error"]["message"]
        .as_str()
        .unwrap()
        .contains("reference"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_edits_apply_whole() {
    let dir = tempfile::tempdir().unwrap();
    let m = simulate(&dir.path().join("sim"));
    let args = serve_args(&m, &dir.path().join("out"), None);
    let app = app(build_session(&args).unwrap());

    let mut tasks = Vec::new();
    for i in 0..16 {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            let body = json!({ "azimuth_deg": 10.0 * i as f64, "offset_north_m": i as f64, "offset_east_m": -(i as f64) });
            let (status, fc) = call(&app, Method::POST, "/transform", Some(body)).await;
            assert_eq!(status, StatusCode::OK);
            // Each response reflects exactly the edit that produced it.
            assert_eq!(fc["parameters"]["azimuth_deg"], 10.0 * i as f64);
            assert_eq!(fc["parameters"]["offset_north_m"], i as f64);
            let (status, _) = call(&app, Method::GET, "/trajectories", None).await;
            assert_eq!(status, StatusCode::OK);
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }

    let (_, last) = call(&app, Method::GET, "/trajectories", None).await;
    let p = &last["parameters"];
    let i = p["offset_north_m"].as_f64().unwrap();
    assert_eq!(p["azimuth_deg"].as_f64().unwrap(), 10.0 * i);
    assert_eq!(p["offset_east_m"].as_f64().unwrap(), -i);

    let replay = app_clone_with_edit(&args, 10.0 * i, i, -i).await;
    assert_eq!(last["features"], replay["features"]);
}

async fn app_clone_with_edit(args: &ServeArgs, az: f64, north: f64, east: f64) -> Value {
    let app = app(build_session(args).unwrap());
    let body = json!({ "azimuth_deg": az, "offset_north_m": north, "offset_east_m": east });
    call(&app, Method::POST, "/transform", Some(body)).await.1
}

#[tokio::test]
async fn static_bundle_is_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let m = simulate(&dir.path().join("sim"));
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(
        ui.join("index.html"),
        "<!doctype html><title>aligner</title>",
    )
    .unwrap();
    let session = build_session(&serve_args(&m, &dir.path().join("out"), None)).unwrap();
    let app = router(Arc::new(RwLock::new(session)), Some(&ui));

    let res = app
        .clone()
        .oneshot(Request::get("/").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    let html = res.into_body().collect().await.unwrap().to_bytes();
    assert!(std::str::from_utf8(&html).unwrap().contains("aligner"));
    let (status, _) = call(&app, Method::GET, "/trajectories", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[test]
fn validator_rejects_malformed_geojson() {
    let ok = json!({ "type": "FeatureCollection", "features": [
        { "type": "Feature", "geometry": { "type": "LineString", "coordinates": [[-96.7, 40.8], [-96.6, 40.9]] }, "properties": {} }
    ], "bbox": [-96.7, 40.8, -96.6, 40.9] });
    assert_eq!(validate_feature_collection(&ok), Ok(()));
    let bad = [
        json!({ "type": "Feature", "features": [] }),
        json!({ "type": "FeatureCollection" }),
        json!({ "type": "FeatureCollection", "features": [{ "type": "Feature", "properties": {} }] }),
        json!({ "type": "FeatureCollection", "features": [{ "type": "Feature", "geometry": null }] }),
        json!({ "type": "FeatureCollection", "features": [{ "type": "Feature", "properties": {},
            "geometry": { "type": "LineString", "coordinates": [[-96.7, 40.8]] } }] }),
        json!({ "type": "FeatureCollection", "features": [{ "type": "Feature", "properties": {},
            "geometry": { "type": "Point", "coordinates": [40.8, -196.7] } }] }),
        json!({ "type": "FeatureCollection", "features": [{ "type": "Feature", "properties": {},
            "geometry": { "type": "Polygon", "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 1]]] } }] }),
        json!({ "type": "FeatureCollection", "features": [], "properties": {} }),
        json!({ "type": "FeatureCollection", "features": [{ "type": "Feature", "properties": {},
            "geometry": { "type": "Point", "coordinates": [1, 1] } }], "bbox": [0, 0, 0.5, 0.5] }),
    ];
    for b in bad {
        assert!(validate_feature_collection(&b).is_err(), "accepted {b}");
    }
}

#[test]
fn session_rejects_a_calibration_for_another_sensor() {
    let dir = tempfile::tempdir().unwrap();
    let m = simulate(&dir.path().join("sim"));
    let other = m
        .expected_calibrations
        .iter()
        .find(|c| c.sensor_id != SENSOR)
        .unwrap();
    let path = dir.path().join("other.json");
    other.save(&path).unwrap();
    let err = build_session(&serve_args(&m, dir.path(), Some(&path)))
        .err()
        .unwrap();
    assert!(err.to_string().contains("radar-camera"), "{err}");
}
