//! Line-oriented track record files.
//!
//! Each record carries `ts` (epoch seconds), `id` (track id), `class`,
//! `pos` and optional `vx`/`vy` (m/s, east/north). `pos` is either a WKT
//! `POINT (east north)` in a planar frame or a `"lat,lon"` pair in WGS84.
//! Planar records may add `frame` (`sensor_local`, the default, or `aeqd`).
//!
//! JSON-lines:
//!
//! ```text
//! {"ts":1000.1,"id":"5769","class":"passenger_vehicle","pos":"POINT (12.5 -3.2)","vx":14.9,"vy":0.3}
//! ```
//!
//! CSV uses the same names as header columns.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ClockSource, Frame, GeoPoint, ObjectClass, Position, SensorDataset, TrackPoint, Trajectory,
    Velocity,
};
use crate::wkt::{format_wkt_point, parse_wkt_point};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordFormat {
    Jsonl,
    Csv,
}

impl RecordFormat {
    /// Guesses the format from a file extension, defaulting to JSON-lines.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => RecordFormat::Csv,
            _ => RecordFormat::Jsonl,
        }
    }
}

/// Dataset-level facts the record stream does not carry.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub sensor_id: String,
    pub origin: GeoPoint,
    pub clock_source: ClockSource,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TrackIdValue {
    Text(String),
    Int(i64),
}

#[derive(Deserialize)]
struct RawRecord {
    ts: Option<f64>,
    id: Option<TrackIdValue>,
    class: Option<String>,
    pos: Option<String>,
    vx: Option<f64>,
    vy: Option<f64>,
    frame: Option<String>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    ts: f64,
    id: &'a str,
    class: &'a str,
    pos: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    vx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame: Option<&'a str>,
}

fn parse_position(pos: &str, frame: Option<&str>) -> std::result::Result<Position, String> {
    let trimmed = pos.trim();
    if trimmed.starts_with(|c: char| c.is_ascii_alphabetic()) {
        let p = parse_wkt_point(trimmed).map_err(|e| e.to_string())?;
        match frame.map(str::trim) {
            None | Some("") | Some("sensor_local") => Ok(Position::SensorLocal(p)),
            Some("aeqd") => Ok(Position::Aeqd(p)),
            Some(other) => Err(format!("unknown planar frame `{other}`")),
        }
    } else {
        let (lat, lon) = trimmed
            .split_once(',')
            .ok_or_else(|| format!("position `{trimmed}` is neither WKT nor `lat,lon`"))?;
        let lat: f64 = lat
            .trim()
            .parse()
            .map_err(|_| format!("bad latitude `{lat}`"))?;
        let lon: f64 = lon
            .trim()
            .parse()
            .map_err(|_| format!("bad longitude `{lon}`"))?;
        GeoPoint::new(lat, lon)
            .map(Position::Wgs84)
            .map_err(|e| e.to_string())
    }
}

fn to_track_point(
    raw: RawRecord,
    sensor_id: &str,
) -> std::result::Result<(String, TrackPoint), String> {
    let ts = raw.ts.ok_or("missing field `ts`")?;
    let id = match raw.id.ok_or("missing field `id`")? {
        TrackIdValue::Text(s) if !s.is_empty() => s,
        TrackIdValue::Text(_) => return Err("empty field `id`".into()),
        TrackIdValue::Int(i) => i.to_string(),
    };
    let class_text = raw.class.ok_or("missing field `class`")?;
    let class =
        ObjectClass::parse(&class_text).ok_or_else(|| format!("unknown class `{class_text}`"))?;
    let pos = raw.pos.ok_or("missing field `pos`")?;
    let position = parse_position(&pos, raw.frame.as_deref())?;
    let velocity = match (raw.vx, raw.vy) {
        (Some(vx), Some(vy)) => Some(Velocity::new(vx, vy)),
        (None, None) => None,
        _ => return Err("`vx` and `vy` must be given together".into()),
    };
    let tp =
        TrackPoint::new(ts, position, velocity, class, sensor_id).map_err(|e| e.to_string())?;
    Ok((id, tp))
}

#[derive(Deserialize)]
struct CsvRow {
    ts: Option<String>,
    id: Option<String>,
    class: Option<String>,
    pos: Option<String>,
    vx: Option<String>,
    vy: Option<String>,
    frame: Option<String>,
}

fn opt_f64(field: &str, v: Option<String>) -> std::result::Result<Option<f64>, String> {
    match v.as_deref().map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|_| format!("field `{field}` is not a number: `{s}`")),
    }
}

fn non_empty(v: Option<String>) -> Option<String> {
    v.filter(|s| !s.trim().is_empty())
}

impl CsvRow {
    fn into_raw(self) -> std::result::Result<RawRecord, String> {
        Ok(RawRecord {
            ts: opt_f64("ts", self.ts)?,
            id: non_empty(self.id).map(TrackIdValue::Text),
            class: non_empty(self.class),
            pos: non_empty(self.pos),
            vx: opt_f64("vx", self.vx)?,
            vy: opt_f64("vy", self.vy)?,
            frame: non_empty(self.frame),
        })
    }
}

/// Reads a record stream, grouping records by track id into time-sorted
/// trajectories.
pub fn load_sensor_records<R: Read>(
    stream: R,
    format: RecordFormat,
    meta: &DatasetMeta,
) -> Result<SensorDataset> {
    let mut entries: Vec<(usize, String, TrackPoint)> = Vec::new();
    let line_err = |line: usize| move |reason: String| Error::Record { line, reason };
    match format {
        RecordFormat::Jsonl => {
            let reader = std::io::BufReader::new(stream);
            for (i, line) in reader.lines().enumerate() {
                let lineno = i + 1;
                let line = line.map_err(|e| Error::Record {
                    line: lineno,
                    reason: e.to_string(),
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
                    line: lineno,
                    reason: e.to_string(),
                })?;
                let (id, tp) = to_track_point(raw, &meta.sensor_id).map_err(line_err(lineno))?;
                entries.push((lineno, id, tp));
            }
        }
        RecordFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_reader(stream);
            let csv_err = |e: csv::Error| Error::Record {
                line: e.position().map(|p| p.line() as usize).unwrap_or(1),
                reason: e.to_string(),
            };
            let headers = reader.headers().map_err(csv_err)?.clone();
            for rec in reader.records() {
                let rec = rec.map_err(csv_err)?;
                let lineno = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                let row: CsvRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Record {
                    line: lineno,
                    reason: e.to_string(),
                })?;
                let (id, tp) = row
                    .into_raw()
                    .and_then(|raw| to_track_point(raw, &meta.sensor_id))
                    .map_err(line_err(lineno))?;
                entries.push((lineno, id, tp));
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut seen: HashSet<(String, u64)> = HashSet::new();
    let mut groups: BTreeMap<String, Vec<TrackPoint>> = BTreeMap::new();
    let mut frames: BTreeMap<String, Frame> = BTreeMap::new();
    for (line, id, tp) in entries {
        if !seen.insert((id.clone(), tp.timestamp.to_bits())) {
            return Err(Error::Record {
                line,
                reason: format!("duplicate timestamp {} for track `{id}`", tp.timestamp),
            });
        }
        let frame = *frames.entry(id.clone()).or_insert(tp.position.frame());
        if frame != tp.position.frame() {
            return Err(Error::Record {
                line,
                reason: format!(
                    "track `{id}` mixes frames {frame} and {}",
                    tp.position.frame()
                ),
            });
        }
        groups.entry(id).or_default().push(tp);
    }
    let trajectories = groups
        .into_iter()
        .map(|(id, pts)| {
            let frame = frames[&id];
            Trajectory::from_unsorted(id, frame, pts)
        })
        .collect::<Result<Vec<_>>>()?;
    SensorDataset::new(
        meta.sensor_id.clone(),
        meta.origin,
        trajectories,
        meta.clock_source,
    )
}

fn position_field(p: &Position) -> (String, Option<&'static str>) {
    match p {
        Position::SensorLocal(l) => (format_wkt_point(*l), None),
        Position::Aeqd(l) => (format_wkt_point(*l), Some("aeqd")),
        Position::Wgs84(g) => (format!("{},{}", g.lat, g.lon), None),
    }
}

/// Every point of `trajectories` ordered by timestamp, then track id.
fn stream_order<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> Vec<(&'a str, &'a TrackPoint)> {
    let mut all: Vec<(&str, &TrackPoint)> = trajectories
        .into_iter()
        .flat_map(|t| t.points().iter().map(move |p| (t.track_id.as_str(), p)))
        .collect();
    all.sort_by(|a, b| {
        a.1.timestamp
            .total_cmp(&b.1.timestamp)
            .then_with(|| a.0.cmp(b.0))
    });
    all
}

/// Writes trajectories as a record stream, ordered by timestamp then track id.
/// Floats are written in shortest round-trip form, so reloading is lossless.
pub fn write_records<'a, W: Write>(
    mut out: W,
    format: RecordFormat,
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> std::io::Result<()> {
    let rows = stream_order(trajectories);
    match format {
        RecordFormat::Jsonl => {
            for (id, p) in rows {
                let (pos, frame) = position_field(&p.position);
                let rec = OutRecord {
                    ts: p.timestamp,
                    id,
                    class: p.object_class.as_str(),
                    pos,
                    vx: p.velocity.map(|v| v.east),
                    vy: p.velocity.map(|v| v.north),
                    frame,
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        RecordFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["ts", "id", "class", "pos", "vx", "vy", "frame"])?;
            for (id, p) in rows {
                let (pos, frame) = position_field(&p.position);
                let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([
                    p.timestamp.to_string(),
                    id.to_string(),
                    p.object_class.as_str().to_string(),
                    pos,
                    fmt_opt(p.velocity.map(|v| v.east)),
                    fmt_opt(p.velocity.map(|v| v.north)),
                    frame.unwrap_or("").to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            sensor_id: "lidar".into(),
            origin: GeoPoint::new(40.75, -96.68).unwrap(),
            clock_source: ClockSource::Ntp,
        }
    }

    fn line(ts: f64, id: &str) -> String {
        format!(r#"{{"ts":{ts},"id":"{id}","class":"passenger_vehicle","pos":"POINT ({ts} 1)"}}"#)
    }

    #[test]
    fn groups_by_track() {
        let text = [
            line(1.0, "A"),
            line(2.0, "B"),
            line(2.0, "A"),
            line(3.0, "A"),
            line(3.0, "B"),
        ]
        .join("\n");
        let ds = load_sensor_records(text.as_bytes(), RecordFormat::Jsonl, &meta()).unwrap();
        assert_eq!(ds.trajectories.len(), 2);
        assert_eq!(ds.trajectories["A"].len(), 3);
        assert_eq!(ds.trajectories["B"].len(), 2);
        assert_eq!(ds.trajectories["A"].frame, Frame::SensorLocal);
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(matches!(
            load_sensor_records("".as_bytes(), RecordFormat::Jsonl, &meta()),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            load_sensor_records(
                "ts,id,class,pos,vx,vy\n".as_bytes(),
                RecordFormat::Csv,
                &meta()
            ),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn sorts_out_of_order_records() {
        let text = [line(2.0, "A"), line(1.0, "A"), line(3.0, "A")].join("\n");
        let ds = load_sensor_records(text.as_bytes(), RecordFormat::Jsonl, &meta()).unwrap();
        assert_eq!(ds.trajectories["A"].timestamps(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn duplicate_timestamp_reports_line() {
        let text = [line(1.0, "A"), line(2.0, "A"), line(1.0, "A")].join("\n");
        match load_sensor_records(text.as_bytes(), RecordFormat::Jsonl, &meta()) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_and_bad_position() {
        let text = r#"{"ts":1.0,"class":"worker","pos":"POINT (0 0)"}"#;
        match load_sensor_records(text.as_bytes(), RecordFormat::Jsonl, &meta()) {
            Err(Error::Record { line: 1, reason }) => assert!(reason.contains("`id`"), "{reason}"),
            other => panic!("unexpected {other:?}"),
        }
        let text = format!(
            "{}\n{}",
            line(1.0, "A"),
            r#"{"ts":2.0,"id":"A","class":"worker","pos":"POINT (0 x)"}"#
        );
        match load_sensor_records(text.as_bytes(), RecordFormat::Jsonl, &meta()) {
            Err(Error::Record { line: 2, reason }) => assert!(reason.contains('x'), "{reason}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_and_latlon() {
        let text = "ts,id,class,pos,vx,vy\n\
                    1.5,7,worker,\"40.75,-96.68\",,\n\
                    1.0,7,worker,\"40.7501,-96.68\",1.0,2.0\n";
        let ds = load_sensor_records(text.as_bytes(), RecordFormat::Csv, &meta()).unwrap();
        let t = &ds.trajectories["7"];
        assert_eq!(t.frame, Frame::Wgs84);
        assert_eq!(t.timestamps(), vec![1.0, 1.5]);
        assert_eq!(t.points()[0].velocity, Some(Velocity::new(1.0, 2.0)));
        assert_eq!(t.points()[1].velocity, None);
    }

    #[test]
    fn numeric_ids_and_aeqd_frame() {
        let text = r#"{"ts":1.0,"id":5769,"class":"unknown","pos":"POINT (1 2)","frame":"aeqd"}"#;
        let ds = load_sensor_records(text.as_bytes(), RecordFormat::Jsonl, &meta()).unwrap();
        assert_eq!(ds.trajectories["5769"].frame, Frame::Aeqd);
    }

    fn shuffled_records() -> impl Strategy<Value = Vec<(u8, u32)>> {
        proptest::collection::btree_set((0u8..4, 1u32..500), 1..60)
            .prop_map(|s| s.into_iter().collect::<Vec<_>>())
            .prop_shuffle()
    }

    proptest! {
        #[test]
        fn output_is_time_sorted(recs in shuffled_records()) {
            let text: Vec<String> = recs.iter().map(|(id, ms)| line(*ms as f64 / 10.0, &format!("T{id}"))).collect();
            let ds = load_sensor_records(text.join("\n").as_bytes(), RecordFormat::Jsonl, &meta()).unwrap();
            prop_assert_eq!(ds.point_count(), recs.len());
            for t in ds.trajectories.values() {
                prop_assert!(t.timestamps().windows(2).all(|w| w[0] < w[1]));
            }
        }

        #[test]
        fn write_then_load_is_lossless(recs in shuffled_records(), csv in any::<bool>()) {
            let text: Vec<String> = recs.iter().map(|(id, ms)| line(*ms as f64 / 7.0, &format!("T{id}"))).collect();
            let ds = load_sensor_records(text.join("\n").as_bytes(), RecordFormat::Jsonl, &meta()).unwrap();
            let fmt = if csv { RecordFormat::Csv } else { RecordFormat::Jsonl };
            let mut buf = Vec::new();
            write_records(&mut buf, fmt, ds.trajectories.values()).unwrap();
            let again = load_sensor_records(buf.as_slice(), fmt, &meta()).unwrap();
            prop_assert_eq!(again, ds);
        }
    }
}
