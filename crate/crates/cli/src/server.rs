//! HTTP service behind the interactive calibration tool.
//!
//! One session per process: a sensor dataset in its raw frame, an optional
//! WGS84 reference trajectory and the calibration being edited. Reads share
//! the session lock; `/transform`, `/auto` and `/save` take it exclusively,
//! so edits apply one at a time.
//!
//! The editable rotation center is the centroid of all sensor points, which
//! keeps the data in place while the azimuth changes. Every response body is
//! a GeoJSON FeatureCollection; non-geometric state rides along as the
//! foreign members `parameters`, `fit`, `saved_to` and `error`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use roadtwin::geo::{centroid, CalibrationConfig};
use roadtwin::model::{Frame, LocalPoint, SensorDataset, Trajectory};
use roadtwin::pipeline::{calibrate_sensor, CalibrateOptions};
use roadtwin::{Error, Result};
use serde_json::{json, Map, Value};
use tokio::sync::RwLock;
use tower_http::services::ServeDir;

use crate::geojson::{trajectory_feature, FeatureCollection};

pub struct Session {
    dataset: SensorDataset,
    reference: Option<Trajectory>,
    calibration: CalibrationConfig,
    center: LocalPoint,
    save_path: PathBuf,
    dirty: bool,
    auto_options: CalibrateOptions,
}

pub type SharedSession = Arc<RwLock<Session>>;

impl Session {
    /// Starts a session. `initial` is re-expressed about the session center;
    /// without it the session starts at the identity.
    pub fn new(
        dataset: SensorDataset,
        reference: Option<Trajectory>,
        initial: Option<CalibrationConfig>,
        save_path: PathBuf,
    ) -> Result<Self> {
        if let Some(r) = &reference {
            if r.frame != Frame::Wgs84 {
                return Err(Error::FrameMismatch {
                    expected: "wgs84 reference trajectory".into(),
                    found: r.frame.to_string(),
                });
            }
        }
        let points: Vec<LocalPoint> = dataset
            .trajectories
            .values()
            .map(Trajectory::planar_points)
            .collect::<Result<Vec<_>>>()?
            .concat();
        let center = if points.is_empty() {
            LocalPoint::ORIGIN
        } else {
            centroid(&points)?
        };
        let calibration = match initial {
            Some(cfg) => {
                if cfg.sensor_id != dataset.sensor_id {
                    return Err(Error::InvalidValue(format!(
                        "calibration is for sensor `{}`, records are from `{}`",
                        cfg.sensor_id, dataset.sensor_id
                    )));
                }
                recentered(&cfg, center, &dataset)
            }
            None => {
                let mut cfg = CalibrationConfig::from_transform(
                    dataset.sensor_id.clone(),
                    dataset.sensor_origin,
                    &roadtwin::geo::RigidTransform2D::new(0.0, LocalPoint::ORIGIN, center),
                );
                cfg.azimuth_deg = 0.0;
                cfg
            }
        };
        Ok(Self {
            dataset,
            reference,
            calibration,
            center,
            save_path,
            dirty: false,
            auto_options: CalibrateOptions::default(),
        })
    }

    pub fn with_auto_options(mut self, options: CalibrateOptions) -> Self {
        self.auto_options = options;
        self
    }

    pub fn calibration(&self) -> &CalibrationConfig {
        &self.calibration
    }

    pub fn center(&self) -> LocalPoint {
        self.center
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn parameters(&self) -> Value {
        let c = &self.calibration;
        json!({
            "sensor_id": c.sensor_id,
            "azimuth_deg": c.azimuth_deg,
            "offset_north_m": c.offset_north_m,
            "offset_east_m": c.offset_east_m,
            "rotation_center_east_m": c.rotation_center_east_m,
            "rotation_center_north_m": c.rotation_center_north_m,
            "time_offset_s": c.time_offset_s,
            "dirty": self.dirty,
        })
    }

    /// Sensor trajectories under the current calibration.
    pub fn trajectories(&self) -> Result<FeatureCollection> {
        let features = self
            .dataset
            .trajectories
            .values()
            .map(|t| {
                trajectory_feature(
                    &self.calibration.calibrate_trajectory(t)?,
                    "sensor",
                    &self.dataset.sensor_id,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureCollection::new(features).with("parameters", self.parameters()))
    }

    pub fn reference(&self) -> Option<Result<FeatureCollection>> {
        self.reference.as_ref().map(|r| {
            let f = trajectory_feature(r, "reference", "reference")?;
            Ok(FeatureCollection::new(vec![f]).with("parameters", self.parameters()))
        })
    }

    /// Sets azimuth and offsets about the session center, keeping the clock
    /// offset.
    pub fn set_transform(&mut self, azimuth_deg: f64, offset_north_m: f64, offset_east_m: f64) {
        let c = &mut self.calibration;
        c.azimuth_deg = azimuth_deg;
        c.offset_north_m = offset_north_m;
        c.offset_east_m = offset_east_m;
        c.rotation_center_east_m = self.center.east;
        c.rotation_center_north_m = self.center.north;
        self.dirty = true;
    }

    /// Adopts a fitted calibration, re-expressed about the session center
    /// with the azimuth in [0, 360) like the editing controls.
    pub fn apply_fit(&mut self, fitted: &CalibrationConfig) {
        self.calibration = recentered(fitted, self.center, &self.dataset);
        self.calibration.azimuth_deg = self.calibration.azimuth_deg.rem_euclid(360.0);
        self.dirty = true;
    }

    /// Writes the calibration file. An existing file is replaced only with
    /// `overwrite`.
    pub fn save(&mut self, overwrite: bool) -> std::result::Result<PathBuf, SaveError> {
        if self.save_path.exists() && !overwrite {
            return Err(SaveError::Exists(self.save_path.clone()));
        }
        if let Some(dir) = self
            .save_path
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
        {
            std::fs::create_dir_all(dir).map_err(|source| {
                SaveError::Write(Error::Io {
                    path: dir.display().to_string(),
                    source,
                })
            })?;
        }
        self.calibration
            .save(&self.save_path)
            .map_err(SaveError::Write)?;
        self.dirty = false;
        Ok(self.save_path.clone())
    }

    pub fn save_path(&self) -> &Path {
        &self.save_path
    }
}

fn recentered(
    cfg: &CalibrationConfig,
    center: LocalPoint,
    dataset: &SensorDataset,
) -> CalibrationConfig {
    let mut out = CalibrationConfig::from_transform(
        dataset.sensor_id.clone(),
        dataset.sensor_origin,
        &cfg.transform().with_center(center),
    );
    // Moving the center leaves the rotation alone; keep the caller's
    // azimuth rather than its normalized equivalent.
    out.azimuth_deg = cfg.azimuth_deg;
    out.time_offset_s = cfg.time_offset_s;
    out.matched_track_id = cfg.matched_track_id.clone();
    out
}

#[derive(Debug)]
pub enum SaveError {
    Exists(PathBuf),
    Write(Error),
}

/// Error response: an empty FeatureCollection with an `error` member.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            field: Some(field.into()),
        }
    }

    fn internal(e: Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = FeatureCollection::empty()
            .with(
                "error",
                json!({ "message": self.message, "field": self.field }),
            )
            .into_value();
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = std::result::Result<Json<Value>, ApiError>;

/// Parses a JSON object body; an empty body reads as `{}`.
fn object_body(body: &[u8]) -> std::result::Result<Map<String, Value>, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(Map::new());
    }
    match serde_json::from_slice(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::field(
            "body",
            "request body must be a JSON object",
        )),
        Err(e) => Err(ApiError::field("body", format!("malformed JSON: {e}"))),
    }
}

fn finite_field(body: &Map<String, Value>, name: &str) -> std::result::Result<f64, ApiError> {
    match body.get(name) {
        None => Err(ApiError::field(name, format!("`{name}` is required"))),
        Some(v) => v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| ApiError::field(name, format!("`{name}` must be a finite number"))),
    }
}

/// Azimuth and offsets from a `/transform` body.
pub fn parse_transform(body: &[u8]) -> std::result::Result<(f64, f64, f64), ApiError> {
    let m = object_body(body)?;
    Ok((
        finite_field(&m, "azimuth_deg")?,
        finite_field(&m, "offset_north_m")?,
        finite_field(&m, "offset_east_m")?,
    ))
}

fn parse_save(body: &[u8]) -> std::result::Result<bool, ApiError> {
    match object_body(body)?.get("overwrite") {
        None => Ok(false),
        Some(Value::Bool(b)) => Ok(*b),
        Some(_) => Err(ApiError::field(
            "overwrite",
            "`overwrite` must be a boolean",
        )),
    }
}

async fn get_trajectories(State(s): State<SharedSession>) -> ApiResult {
    let session = s.read().await;
    Ok(Json(
        session
            .trajectories()
            .map_err(ApiError::internal)?
            .into_value(),
    ))
}

async fn get_reference(State(s): State<SharedSession>) -> ApiResult {
    let session = s.read().await;
    match session.reference() {
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "no reference trajectory loaded",
        )),
        Some(fc) => Ok(Json(fc.map_err(ApiError::internal)?.into_value())),
    }
}

async fn post_transform(State(s): State<SharedSession>, body: Bytes) -> ApiResult {
    let (az, north, east) = parse_transform(&body)?;
    let mut session = s.write().await;
    session.set_transform(az, north, east);
    Ok(Json(
        session
            .trajectories()
            .map_err(ApiError::internal)?
            .into_value(),
    ))
}

async fn post_auto(State(s): State<SharedSession>) -> ApiResult {
    let (dataset, reference, options) = {
        let session = s.read().await;
        let reference = session
            .reference
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no reference trajectory loaded"))?;
        (
            session.dataset.clone(),
            reference,
            session.auto_options.clone(),
        )
    };
    let outcome =
        tokio::task::spawn_blocking(move || calibrate_sensor(&dataset, &reference, &options))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let mut session = s.write().await;
    session.apply_fit(&outcome.config);
    let fit = serde_json::to_value(outcome.report()).expect("report serializes");
    let fc = session.trajectories().map_err(ApiError::internal)?;
    Ok(Json(fc.with("fit", fit).into_value()))
}

async fn post_save(State(s): State<SharedSession>, body: Bytes) -> ApiResult {
    let overwrite = parse_save(&body)?;
    let mut session = s.write().await;
    match session.save(overwrite) {
        Ok(path) => Ok(Json(
            FeatureCollection::empty()
                .with("saved_to", json!(path.display().to_string()))
                .with("parameters", session.parameters())
                .into_value(),
        )),
        Err(SaveError::Exists(path)) => Err(ApiError {
            status: StatusCode::CONFLICT,
            message: format!(
                "{} exists; resend with \"overwrite\": true to replace it",
                path.display()
            ),
            field: Some("overwrite".into()),
        }),
        Err(SaveError::Write(e)) => Err(ApiError::internal(e)),
    }
}

/// Routes of the calibration API, plus static files from `static_dir` for
/// any other path.
pub fn router(session: SharedSession, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/trajectories", get(get_trajectories))
        .route("/reference", get(get_reference))
        .route("/transform", post(post_transform))
        .route("/auto", post(post_auto))
        .route("/save", post(post_save))
        .with_state(session);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
