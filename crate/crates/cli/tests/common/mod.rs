//! RFC 7946 checks and a simulated session fixture shared by the service
//! tests.
#![allow(dead_code)]

use std::path::Path;

use roadtwin::pipeline::{
    read_json, read_track, simulate_to_dir, SimulationManifest, MANIFEST_FILE,
};
use roadtwin::simulator::SceneConfig;
use serde_json::{Map, Value};

pub fn scene_config() -> SceneConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/scene.json");
    read_json(Path::new(path)).expect("reference scene parses")
}

/// Simulates the reference scene into `dir` and returns its manifest with
/// absolute paths.
pub fn simulate(dir: &Path) -> SimulationManifest {
    simulate_to_dir(&scene_config(), dir).unwrap();
    SimulationManifest::load(&dir.join(MANIFEST_FILE)).unwrap()
}

pub fn reference_track(m: &SimulationManifest) -> roadtwin::model::Trajectory {
    read_track(&m.ground_truth, "test-vehicle").unwrap()
}

type Check = Result<(), String>;

fn object<'a>(v: &'a Value, what: &str) -> Result<&'a Map<String, Value>, String> {
    v.as_object()
        .ok_or_else(|| format!("{what} is not an object"))
}

fn forbid(o: &Map<String, Value>, what: &str, members: &[&str]) -> Check {
    match members.iter().find(|m| o.contains_key(**m)) {
        Some(m) => Err(format!("{what} must not contain `{m}`")),
        None => Ok(()),
    }
}

fn position(v: &Value) -> Result<Vec<f64>, String> {
    let a = v.as_array().ok_or("position is not an array")?;
    if !(2..=3).contains(&a.len()) {
        return Err(format!("position has {} elements", a.len()));
    }
    let p: Vec<f64> = a
        .iter()
        .map(|x| x.as_f64().ok_or("position element is not a number"))
        .collect::<Result<_, _>>()?;
    if !(-180.0..=180.0).contains(&p[0]) || !(-90.0..=90.0).contains(&p[1]) {
        return Err(format!("position {p:?} is outside WGS84 bounds"));
    }
    Ok(p)
}

fn positions(v: &Value, min: usize, what: &str) -> Result<Vec<Vec<f64>>, String> {
    let a = v
        .as_array()
        .ok_or_else(|| format!("{what} coordinates are not an array"))?;
    if a.len() < min {
        return Err(format!(
            "{what} needs at least {min} positions, has {}",
            a.len()
        ));
    }
    a.iter().map(position).collect()
}

fn geometry(v: &Value, out: &mut Vec<Vec<f64>>) -> Check {
    let o = object(v, "geometry")?;
    forbid(o, "geometry", &["features", "geometry", "properties"])?;
    let ty = o
        .get("type")
        .and_then(Value::as_str)
        .ok_or("geometry has no type")?;
    if ty == "GeometryCollection" {
        for g in o
            .get("geometries")
            .and_then(Value::as_array)
            .ok_or("GeometryCollection without geometries")?
        {
            geometry(g, out)?;
        }
        return Ok(());
    }
    let c = o
        .get("coordinates")
        .ok_or_else(|| format!("{ty} has no coordinates"))?;
    let nested = |min_inner: usize, closed: bool, out: &mut Vec<Vec<f64>>| -> Check {
        for part in c
            .as_array()
            .ok_or_else(|| format!("{ty} coordinates are not an array"))?
        {
            let ps = positions(part, min_inner, ty)?;
            if closed && ps.first() != ps.last() {
                return Err(format!("{ty} ring is not closed"));
            }
            out.extend(ps);
        }
        Ok(())
    };
    match ty {
        "Point" => out.push(position(c)?),
        "MultiPoint" => out.extend(positions(c, 0, ty)?),
        "LineString" => out.extend(positions(c, 2, ty)?),
        "MultiLineString" => nested(2, false, out)?,
        "Polygon" => nested(4, true, out)?,
        "MultiPolygon" => {
            for poly in c
                .as_array()
                .ok_or("MultiPolygon coordinates are not an array")?
            {
                for ring in poly
                    .as_array()
                    .ok_or("MultiPolygon polygon is not an array")?
                {
                    let ps = positions(ring, 4, ty)?;
                    if ps.first() != ps.last() {
                        return Err("MultiPolygon ring is not closed".into());
                    }
                    out.extend(ps);
                }
            }
        }
        other => return Err(format!("unknown geometry type `{other}`")),
    }
    Ok(())
}

fn feature(v: &Value, out: &mut Vec<Vec<f64>>) -> Check {
    let o = object(v, "feature")?;
    forbid(o, "Feature", &["features", "coordinates", "geometries"])?;
    if o.get("type").and_then(Value::as_str) != Some("Feature") {
        return Err("feature type is not `Feature`".into());
    }
    match o.get("geometry") {
        None => return Err("feature has no geometry member".into()),
        Some(Value::Null) => {}
        Some(g) => geometry(g, out)?,
    }
    match o.get("properties") {
        None => return Err("feature has no properties member".into()),
        Some(Value::Null | Value::Object(_)) => {}
        Some(_) => return Err("feature properties are neither object nor null".into()),
    }
    match o.get("id") {
        None | Some(Value::String(_) | Value::Number(_)) => Ok(()),
        Some(_) => Err("feature id is neither string nor number".into()),
    }
}

fn check_bbox(v: &Value, pts: &[Vec<f64>]) -> Check {
    let b: Vec<f64> = v
        .as_array()
        .ok_or("bbox is not an array")?
        .iter()
        .map(|x| x.as_f64().ok_or("bbox element is not a number"))
        .collect::<Result<_, _>>()?;
    if b.len() != 4 && b.len() != 6 {
        return Err(format!("bbox has {} elements", b.len()));
    }
    let d = b.len() / 2;
    if b[1] > b[d + 1] {
        return Err("bbox south is above north".into());
    }
    for p in pts {
        let inside = (0..2).all(|i| b[i] - 1e-12 <= p[i] && p[i] <= b[d + i] + 1e-12);
        if !inside {
            return Err(format!("position {p:?} lies outside bbox {b:?}"));
        }
    }
    Ok(())
}

/// Checks a FeatureCollection against RFC 7946.
pub fn validate_feature_collection(v: &Value) -> Check {
    let o = object(v, "body")?;
    if o.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err("body type is not `FeatureCollection`".into());
    }
    forbid(
        o,
        "FeatureCollection",
        &["coordinates", "geometry", "geometries", "properties"],
    )?;
    let mut pts = Vec::new();
    for f in o
        .get("features")
        .and_then(Value::as_array)
        .ok_or("features is not an array")?
    {
        feature(f, &mut pts)?;
    }
    match o.get("bbox") {
        Some(b) => check_bbox(b, &pts),
        None => Ok(()),
    }
}
