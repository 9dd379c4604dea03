//! GeoJSON (RFC 7946) bodies for the calibration service.
//!
//! Positions are `[lon, lat]`. A trajectory with two or more points is a
//! LineString feature, a single point a Point feature. Service state that
//! is not geometry travels as foreign members on the FeatureCollection.

use roadtwin::model::{Frame, Position, Trajectory};
use roadtwin::{Error, Result};
use serde_json::{json, Map, Value};

/// Feature for one WGS84 trajectory.
pub fn trajectory_feature(traj: &Trajectory, role: &str, source: &str) -> Result<Value> {
    let coords = traj
        .points()
        .iter()
        .map(|p| match p.position {
            Position::Wgs84(g) => Ok(json!([g.lon, g.lat])),
            _ => Err(Error::FrameMismatch {
                expected: Frame::Wgs84.to_string(),
                found: traj.frame.to_string(),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    let geometry = match coords.as_slice() {
        [] => Value::Null,
        [single] => json!({ "type": "Point", "coordinates": single }),
        _ => json!({ "type": "LineString", "coordinates": coords }),
    };
    Ok(json!({
        "type": "Feature",
        "geometry": geometry,
        "properties": {
            "track_id": traj.track_id,
            "role": role,
            "source": source,
            "class": traj.dominant_class().as_str(),
            "points": traj.len(),
            "start_time": traj.start_time(),
            "end_time": traj.end_time(),
        },
    }))
}

/// A FeatureCollection under construction.
#[derive(Clone, Debug, Default)]
pub struct FeatureCollection {
    features: Vec<Value>,
    members: Map<String, Value>,
}

impl FeatureCollection {
    pub fn new(features: Vec<Value>) -> Self {
        Self {
            features,
            members: Map::new(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Adds a foreign member. `type`, `features` and `bbox` are reserved.
    pub fn with(mut self, key: &str, value: Value) -> Self {
        assert!(
            !matches!(key, "type" | "features" | "bbox"),
            "reserved GeoJSON member `{key}`"
        );
        self.members.insert(key.to_owned(), value);
        self
    }

    pub fn features(&self) -> &[Value] {
        &self.features
    }

    pub fn into_value(self) -> Value {
        let mut obj = Map::new();
        obj.insert("type".into(), json!("FeatureCollection"));
        if let Some(bbox) = bbox(&self.features) {
            obj.insert("bbox".into(), json!(bbox));
        }
        obj.insert("features".into(), Value::Array(self.features));
        obj.extend(self.members);
        Value::Object(obj)
    }
}

/// `[west, south, east, north]` over every position, or `None` without
/// geometry.
fn bbox(features: &[Value]) -> Option<[f64; 4]> {
    let mut b = [
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    let mut any = false;
    let mut visit = |pos: &Value| {
        if let (Some(lon), Some(lat)) = (pos[0].as_f64(), pos[1].as_f64()) {
            b = [b[0].min(lon), b[1].min(lat), b[2].max(lon), b[3].max(lat)];
            any = true;
        }
    };
    for f in features {
        let g = &f["geometry"];
        match g["type"].as_str() {
            Some("Point") => visit(&g["coordinates"]),
            Some("LineString") => g["coordinates"]
                .as_array()
                .into_iter()
                .flatten()
                .for_each(&mut visit),
            _ => {}
        }
    }
    any.then_some(b)
}
