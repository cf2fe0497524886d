//! Parsers for the link, speed and report files, and TMC conflation.
//!
//! File schemas:
//!
//! * links: GeoJSON `FeatureCollection` of `LineString` features with
//!   properties `id, tmc, fclass, lanes, divider, intersection, frontage,
//!   min_alt_km, slope, name, direction` (optional `length_mi`, and
//!   `ramp`/`bridge`/`tunnel` flags), or CSV with the same columns plus a WKT
//!   `geometry` column.
//! * speeds: CSV `segment_id,timestamp,speed_mph`, timestamps `YYYY-MM-DDTHH:00`.
//! * reports: newline-delimited JSON, one object per line with `id, subtype,
//!   lat, lon, start, end, road_name, direction, reliability`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use serde_json::Value;
use thiserror::Error;

use crate::model::{
    derive_bearing, Divider, EventReport, FunctionalClass, LaneCategory, LatLon, LinkAttributes,
    ModelError, Polyline, RoadLink, SpeedSample, SpeedSeries,
};
use crate::time::{parse_local, Hour};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid document: {0}")]
    Document(String),
    #[error("{unit} {index}: missing required attribute `{field}`")]
    MissingField {
        unit: &'static str,
        index: usize,
        field: &'static str,
    },
    #[error("{unit} {index}: {msg}")]
    Row {
        unit: &'static str,
        index: usize,
        msg: String,
    },
    #[error("{unit} {index}: {source}")]
    Model {
        unit: &'static str,
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error("link `{0}` has no TMC code")]
    MissingTmc(String),
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkFormat {
    GeoJson,
    Csv,
}

impl FromStr for LinkFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "geojson" | "json" => Ok(LinkFormat::GeoJson),
            "csv" => Ok(LinkFormat::Csv),
            other => Err(format!("unknown link format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLinks {
    pub links: Vec<RoadLink>,
    /// Ramps, bridges and tunnels filtered out at ingest.
    pub excluded: usize,
}

pub fn parse_links(path: &Path, format: LinkFormat) -> Result<ParsedLinks, IngestError> {
    let text = read_text(path)?;
    match format {
        LinkFormat::GeoJson => links_from_geojson(&text),
        LinkFormat::Csv => links_from_csv(&text),
    }
}

/// Uniform access to one feature's or row's attributes.
trait Record {
    fn text(&self, key: &str) -> Option<String>;
}

impl Record for serde_json::Map<String, Value> {
    fn text(&self, key: &str) -> Option<String> {
        match self.get(key)? {
            Value::Null => None,
            Value::String(s) => Some(s.clone()),
            Value::Bool(b) => Some(b.to_string()),
            Value::Number(n) => Some(n.to_string()),
            other => Some(other.to_string()),
        }
    }
}

struct CsvRow<'a> {
    header: &'a csv::StringRecord,
    row: &'a csv::StringRecord,
}

impl Record for CsvRow<'_> {
    fn text(&self, key: &str) -> Option<String> {
        let i = self.header.iter().position(|h| h.trim() == key)?;
        let v = self.row.get(i)?.trim();
        (!v.is_empty()).then(|| v.to_string())
    }
}

fn parse_flag(v: &str) -> Option<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "t" | "y" | "yes" | "1" => Some(true),
        "false" | "f" | "n" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn link_from_record(
    rec: &dyn Record,
    geometry: Polyline,
    unit: &'static str,
    index: usize,
) -> Result<Option<RoadLink>, IngestError> {
    let need = |field: &'static str| {
        rec.text(field)
            .ok_or(IngestError::MissingField { unit, index, field })
    };
    let model = |source: ModelError| IngestError::Model {
        unit,
        index,
        source,
    };
    let row = |msg: String| IngestError::Row { unit, index, msg };
    let flag = |field: &'static str| -> Result<bool, IngestError> {
        let v = need(field)?;
        parse_flag(&v).ok_or_else(|| row(format!("invalid boolean `{v}` for `{field}`")))
    };
    let num = |field: &'static str| -> Result<f64, IngestError> {
        let v = need(field)?;
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| row(format!("invalid number `{v}` for `{field}`")))
    };

    let excluded = ["ramp", "bridge", "tunnel"]
        .iter()
        .any(|k| rec.text(k).and_then(|v| parse_flag(&v)).unwrap_or(false));

    let id = need("id")?;
    let attrs = LinkAttributes {
        functional_class: need("fclass")?.parse().map_err(model)?,
        lane_category: need("lanes")?.parse().map_err(model)?,
        divider: need("divider")?.parse().map_err(model)?,
        is_intersection: flag("intersection")?,
        is_frontage: flag("frontage")?,
        min_altitude: num("min_alt_km")?,
        slope: num("slope")?,
        road_name: need("name")?,
        direction_tag: rec.text("direction"),
    };
    if excluded {
        return Ok(None);
    }
    let length = match rec.text("length_mi") {
        Some(v) => Some(
            v.parse::<f64>()
                .map_err(|_| row(format!("invalid number `{v}` for `length_mi`")))?,
        ),
        None => None,
    };
    let tmc = rec.text("tmc");
    RoadLink::new(id, tmc, geometry, length, attrs)
        .map(Some)
        .map_err(model)
}

fn coords_to_points(coords: &Value) -> Option<Vec<LatLon>> {
    coords
        .as_array()?
        .iter()
        .map(|c| {
            let c = c.as_array()?;
            let lon = c.first()?.as_f64()?;
            let lat = c.get(1)?.as_f64()?;
            Some(LatLon { lat, lon })
        })
        .collect()
}

fn geojson_geometry(g: &Value) -> Result<Vec<LatLon>, String> {
    let kind = g.get("type").and_then(Value::as_str).unwrap_or("");
    let coords = g.get("coordinates").ok_or("geometry without coordinates")?;
    match kind {
        "LineString" => coords_to_points(coords).ok_or_else(|| "malformed LineString".to_string()),
        "MultiLineString" => {
            let parts = coords.as_array().ok_or("malformed MultiLineString")?;
            let mut pts: Vec<LatLon> = Vec::new();
            for p in parts {
                for q in coords_to_points(p).ok_or("malformed MultiLineString")? {
                    if pts.last() != Some(&q) {
                        pts.push(q);
                    }
                }
            }
            Ok(pts)
        }
        other => Err(format!("unsupported geometry type `{other}`")),
    }
}

pub fn links_from_geojson(text: &str) -> Result<ParsedLinks, IngestError> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| IngestError::Document(e.to_string()))?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| IngestError::Document("expected a FeatureCollection".into()))?;
    let mut links = Vec::with_capacity(features.len());
    let mut excluded = 0;
    let empty = serde_json::Map::new();
    for (index, f) in features.iter().enumerate() {
        let unit = "feature";
        let props = f
            .get("properties")
            .and_then(Value::as_object)
            .unwrap_or(&empty);
        let geom = f
            .get("geometry")
            .filter(|g| !g.is_null())
            .ok_or(IngestError::MissingField {
                unit,
                index,
                field: "geometry",
            })?;
        let pts = geojson_geometry(geom).map_err(|msg| IngestError::Row { unit, index, msg })?;
        let poly = Polyline::new(pts).map_err(|source| IngestError::Model {
            unit,
            index,
            source,
        })?;
        match link_from_record(props, poly, unit, index)? {
            Some(l) => links.push(l),
            None => excluded += 1,
        }
    }
    Ok(ParsedLinks { links, excluded })
}

/// Parse `LINESTRING (lon lat, lon lat, ...)`.
pub fn parse_wkt_linestring(s: &str) -> Result<Vec<LatLon>, String> {
    let t = s.trim();
    let upper = t.to_ascii_uppercase();
    let rest = upper
        .strip_prefix("LINESTRING")
        .ok_or_else(|| format!("expected LINESTRING, got `{t}`"))?;
    let inner = rest
        .trim()
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| format!("malformed LINESTRING `{t}`"))?;
    inner
        .split(',')
        .map(|pair| {
            let mut it = pair.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(lon)), Some(Ok(lat)), None) => Ok(LatLon { lat, lon }),
                _ => Err(format!("malformed coordinate `{}`", pair.trim())),
            }
        })
        .collect()
}

pub fn to_wkt(p: &Polyline) -> String {
    let body: Vec<String> = p
        .points()
        .iter()
        .map(|q| format!("{} {}", q.lon, q.lat))
        .collect();
    format!("LINESTRING ({})", body.join(", "))
}

pub fn links_from_csv(text: &str) -> Result<ParsedLinks, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| IngestError::Document(e.to_string()))?
        .clone();
    let mut links = Vec::new();
    let mut excluded = 0;
    for (i, rec) in rdr.records().enumerate() {
        let unit = "row";
        let index = i + 1;
        let row = rec.map_err(|e| IngestError::Row {
            unit,
            index,
            msg: e.to_string(),
        })?;
        let r = CsvRow {
            header: &header,
            row: &row,
        };
        let wkt = r.text("geometry").ok_or(IngestError::MissingField {
            unit,
            index,
            field: "geometry",
        })?;
        let pts =
            parse_wkt_linestring(&wkt).map_err(|msg| IngestError::Row { unit, index, msg })?;
        let poly = Polyline::new(pts).map_err(|source| IngestError::Model {
            unit,
            index,
            source,
        })?;
        match link_from_record(&r, poly, unit, index)? {
            Some(l) => links.push(l),
            None => excluded += 1,
        }
    }
    Ok(ParsedLinks { links, excluded })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSpeeds {
    pub series: Vec<SpeedSeries>,
    /// Rows that overwrote an earlier row for the same (id, hour).
    pub duplicates: usize,
    /// Rows dropped because the value was not positive.
    pub dropped_nonpositive: usize,
}

pub fn parse_speeds(path: &Path) -> Result<ParsedSpeeds, IngestError> {
    speeds_from_csv(&read_text(path)?, "speed_mph")
}

/// Parse an hourly value table `segment_id,timestamp,<value_column>`.
pub fn speeds_from_csv(text: &str, value_column: &str) -> Result<ParsedSpeeds, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| IngestError::Document(e.to_string()))?
        .clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let (Some(ci), Some(ct), Some(cv)) = (col("segment_id"), col("timestamp"), col(value_column))
    else {
        return Err(IngestError::Document(format!(
            "expected columns segment_id,timestamp,{value_column}"
        )));
    };
    let mut grouped: BTreeMap<String, BTreeMap<Hour, f64>> = BTreeMap::new();
    let (mut duplicates, mut dropped) = (0, 0);
    for (i, rec) in rdr.records().enumerate() {
        let unit = "row";
        let index = i + 1;
        let row = rec.map_err(|e| IngestError::Row {
            unit,
            index,
            msg: e.to_string(),
        })?;
        let get = |c: usize| row.get(c).unwrap_or("").trim();
        let hour = Hour::parse(get(ct)).map_err(|e| IngestError::Row {
            unit,
            index,
            msg: e.to_string(),
        })?;
        let raw = get(cv);
        let value: f64 = raw.parse().map_err(|_| IngestError::Row {
            unit,
            index,
            msg: format!("invalid {value_column} `{raw}`"),
        })?;
        if !(value > 0.0) || !value.is_finite() {
            dropped += 1;
            continue;
        }
        let id = get(ci).to_string();
        if grouped
            .entry(id.clone())
            .or_default()
            .insert(hour, value)
            .is_some()
        {
            duplicates += 1;
            warn!("duplicate sample for {id} at {hour}; keeping the later row {index}");
        }
    }
    if dropped > 0 {
        info!("dropped {dropped} non-positive {value_column} rows");
    }
    let series = grouped
        .into_iter()
        .map(|(link_id, m)| SpeedSeries {
            link_id,
            samples: m
                .into_iter()
                .map(|(hour, speed)| SpeedSample { hour, speed })
                .collect(),
        })
        .collect();
    Ok(ParsedSpeeds {
        series,
        duplicates,
        dropped_nonpositive: dropped,
    })
}

pub fn parse_reports(path: &Path) -> Result<Vec<EventReport>, IngestError> {
    reports_from_ndjson(&read_text(path)?)
}

pub fn reports_from_ndjson(text: &str) -> Result<Vec<EventReport>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let unit = "line";
        let index = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Map<String, Value> =
            serde_json::from_str(line).map_err(|e| IngestError::Row {
                unit,
                index,
                msg: e.to_string(),
            })?;
        let need = |field: &'static str| {
            v.text(field)
                .ok_or(IngestError::MissingField { unit, index, field })
        };
        let row = |msg: String| IngestError::Row { unit, index, msg };
        let num = |field: &'static str| -> Result<f64, IngestError> {
            let s = need(field)?;
            s.parse::<f64>()
                .map_err(|_| row(format!("invalid number `{s}` for `{field}`")))
        };
        let time = |field: &'static str| -> Result<_, IngestError> {
            parse_local(&need(field)?).map_err(|e| row(e.to_string()))
        };
        let location =
            LatLon::new(num("lat")?, num("lon")?).map_err(|source| IngestError::Model {
                unit,
                index,
                source,
            })?;
        let road = v
            .text("road_name")
            .or_else(|| v.text("street"))
            .unwrap_or_default();
        let report = EventReport::new(
            need("id")?,
            need("subtype")?,
            location,
            time("start")?,
            time("end")?,
            &road,
            v.text("direction").as_deref(),
            num("reliability")?,
        )
        .map_err(|source| IngestError::Model {
            unit,
            index,
            source,
        })?;
        out.push(report);
    }
    Ok(out)
}

/// Length-weighted mode; ties go to the lexicographically smallest key.
fn weighted_mode<'a>(items: impl IntoIterator<Item = (&'a str, f64)>) -> Option<&'a str> {
    let mut acc: BTreeMap<&str, f64> = BTreeMap::new();
    for (k, w) in items {
        *acc.entry(k).or_insert(0.0) += w;
    }
    let mut best: Option<(&str, f64)> = None;
    for (k, w) in acc {
        // BTreeMap iterates keys ascending, so strict `>` keeps the smallest on ties.
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((k, w));
        }
    }
    best.map(|(k, _)| k)
}

/// Merge map links sharing a TMC code into one link per code.
///
/// Categorical attributes take the length-weighted mode, numeric attributes
/// the length-weighted mean; lengths add and geometries concatenate in input
/// order. The output is ordered by TMC code and each link's id is its code.
pub fn conflate_by_tmc(links: &[RoadLink]) -> Result<Vec<RoadLink>, IngestError> {
    let mut groups: BTreeMap<&str, Vec<&RoadLink>> = BTreeMap::new();
    for l in links {
        let tmc = l
            .tmc_code
            .as_deref()
            .ok_or_else(|| IngestError::MissingTmc(l.link_id.clone()))?;
        groups.entry(tmc).or_default().push(l);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (tmc, group) in groups {
        out.push(conflate_group(tmc, &group)?);
    }
    Ok(out)
}

fn conflate_group(tmc: &str, group: &[&RoadLink]) -> Result<RoadLink, IngestError> {
    let model = |source: ModelError| IngestError::Model {
        unit: "tmc group",
        index: 0,
        source,
    };
    if let [only] = group {
        let mut l = (*only).clone();
        l.link_id = tmc.to_string();
        return Ok(l);
    }
    // Sum in link-id order so the means do not depend on input order.
    let mut by_id: Vec<&RoadLink> = group.to_vec();
    by_id.sort_by(|a, b| a.link_id.cmp(&b.link_id));
    let total: f64 = by_id.iter().map(|l| l.length).sum();
    let wmean =
        |f: fn(&RoadLink) -> f64| by_id.iter().map(|l| l.length * f(l)).sum::<f64>() / total;

    let mode_of = |f: &dyn Fn(&RoadLink) -> String| -> String {
        let keys: Vec<(String, f64)> = by_id.iter().map(|l| (f(l), l.length)).collect();
        weighted_mode(keys.iter().map(|(k, w)| (k.as_str(), *w)))
            .unwrap_or_default()
            .to_string()
    };
    let fclass: FunctionalClass = mode_of(&|l| l.functional_class.to_string())
        .parse()
        .map_err(model)?;
    let lanes: LaneCategory = mode_of(&|l| l.lane_category.to_string())
        .parse()
        .map_err(model)?;
    let divider: Divider = mode_of(&|l| l.divider.to_string()).parse().map_err(model)?;
    let intersection = mode_of(&|l| l.is_intersection.to_string()) == "true";
    let frontage = mode_of(&|l| l.is_frontage.to_string()) == "true";
    let name = mode_of(&|l| l.road_name.clone());

    let tags: Vec<(&str, f64)> = by_id
        .iter()
        .filter_map(|l| l.direction_tag.as_deref().map(|d| (d, l.length)))
        .collect();
    let direction = weighted_mode(tags.iter().copied()).map(str::to_string);
    let distinct: std::collections::BTreeSet<&str> = tags.iter().map(|(d, _)| *d).collect();
    if distinct.len() > 1 {
        warn!("TMC {tmc}: conflicting direction tags {distinct:?}; keeping {direction:?}");
    }

    let geometry = Polyline::concat(group.iter().map(|l| &l.geometry)).map_err(model)?;
    // A concatenation that closes on itself has no defined endpoint bearing;
    // fall back to the longest member's.
    let bearing = derive_bearing(&geometry).unwrap_or_else(|_| {
        by_id
            .iter()
            .max_by(|a, b| {
                a.length
                    .total_cmp(&b.length)
                    .then(b.link_id.cmp(&a.link_id))
            })
            .map(|l| l.bearing)
            .unwrap_or(0.0)
    });
    Ok(RoadLink {
        link_id: tmc.to_string(),
        tmc_code: Some(tmc.to_string()),
        geometry,
        length: total,
        bearing,
        functional_class: fclass,
        lane_category: lanes,
        divider,
        is_intersection: intersection,
        is_frontage: frontage,
        min_altitude: wmean(|l| l.min_altitude),
        slope: wmean(|l| l.slope),
        road_name: name,
        direction_tag: direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIXTURE: &str = r#"{"type":"FeatureCollection","features":[
      {"type":"Feature","geometry":{"type":"LineString","coordinates":[[0.0,0.0],[0.1,0.0]]},
       "properties":{"id":"a","tmc":"T1","fclass":"freeway","lanes":"4+","divider":"physical",
        "intersection":false,"frontage":false,"min_alt_km":0.2,"slope":1.0,"name":"I-35E","direction":"N"}},
      {"type":"Feature","geometry":{"type":"LineString","coordinates":[[0.1,0.0],[0.1,0.05]]},
       "properties":{"id":"b","tmc":"T1","fclass":"arterial","lanes":"2-3","divider":"none",
        "intersection":true,"frontage":false,"min_alt_km":0.3,"slope":2,"name":"Main St."}},
      {"type":"Feature","geometry":{"type":"LineString","coordinates":[[1.0,1.0],[1.0,1.01],[1.01,1.02]]},
       "properties":{"id":7,"tmc":"T2","fclass":"Local Street","lanes":"1","divider":"legal",
        "intersection":0,"frontage":1,"min_alt_km":0.1,"slope":0.5,"name":"Oak Ave"}}
    ]}"#;

    // Independent great-circle distance oracle (spherical law of cosines).
    fn cosine_law_miles(a: (f64, f64), b: (f64, f64)) -> f64 {
        let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
        let dl = (b.1 - a.1).to_radians();
        let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
        6_371_008.8 * c.clamp(-1.0, 1.0).acos() / 1609.344
    }

    #[test]
    fn geojson_fixture_parses() {
        let parsed = links_from_geojson(FIXTURE).unwrap();
        assert_eq!(parsed.links.len(), 3);
        assert_eq!(parsed.excluded, 0);
        let a = &parsed.links[0];
        assert_eq!(a.functional_class, FunctionalClass::Freeway);
        assert_eq!(a.lane_category, LaneCategory::FourPlus);
        assert_eq!(a.divider, Divider::Physical);
        assert_eq!(a.road_name, "i35e");
        let c = &parsed.links[2];
        assert_eq!(c.link_id, "7");
        assert_eq!(c.functional_class, FunctionalClass::LocalStreet);
        assert!(c.is_frontage && !c.is_intersection);
    }

    #[test]
    fn equatorial_tenth_degree_length() {
        let parsed = links_from_geojson(FIXTURE).unwrap();
        let oracle = cosine_law_miles((0.0, 0.0), (0.0, 0.1));
        assert!((parsed.links[0].length - oracle).abs() < 1e-6);
        assert!((parsed.links[0].length - 6.91).abs() < 0.01);
    }

    #[test]
    fn missing_class_cites_feature() {
        let text = FIXTURE.replacen(r#""fclass":"arterial","#, "", 1);
        let err = links_from_geojson(&text).unwrap_err();
        assert!(
            matches!(
                err,
                IngestError::MissingField {
                    index: 1,
                    field: "fclass",
                    ..
                }
            ),
            "{err}"
        );
        assert!(err.to_string().contains("feature 1"));
    }

    #[test]
    fn invalid_enum_literal_named() {
        let text = FIXTURE.replacen("\"4+\"", "\"seven\"", 1);
        let err = links_from_geojson(&text).unwrap_err();
        assert!(err.to_string().contains("seven"), "{err}");
    }

    #[test]
    fn ramps_are_excluded() {
        let text = FIXTURE.replacen(r#""name":"Oak Ave""#, r#""name":"Oak Ave","ramp":true"#, 1);
        let parsed = links_from_geojson(&text).unwrap();
        assert_eq!(parsed.links.len(), 2);
        assert_eq!(parsed.excluded, 1);
    }

    #[test]
    fn csv_links_with_wkt() {
        let text = "id,tmc,fclass,lanes,divider,intersection,frontage,min_alt_km,slope,name,direction,geometry\n\
                    x,T9,collector,2-3,none,false,true,0.15,1.2,Elm St,,\"LINESTRING (-96.8 32.7, -96.79 32.71)\"\n";
        let parsed = links_from_csv(text).unwrap();
        assert_eq!(parsed.links.len(), 1);
        let l = &parsed.links[0];
        assert_eq!(
            l.geometry.points()[1],
            LatLon {
                lat: 32.71,
                lon: -96.79
            }
        );
        assert_eq!(l.direction_tag, None);
        assert_eq!(
            parse_wkt_linestring(&to_wkt(&l.geometry)).unwrap(),
            l.geometry.points()
        );
    }

    #[test]
    fn speeds_grouped_and_sorted() {
        let mut text = String::from("segment_id,timestamp,speed_mph\n");
        for h in (0..48).rev() {
            let t = Hour(456_000 + h);
            text.push_str(&format!("T1,{t},{}\n", 40 + h));
        }
        let p = speeds_from_csv(&text, "speed_mph").unwrap();
        assert_eq!(p.series.len(), 1);
        assert_eq!(p.series[0].samples.len(), 48);
        assert!(p.series[0]
            .samples
            .windows(2)
            .all(|w| w[0].hour < w[1].hour));
    }

    #[test]
    fn duplicate_last_write_wins() {
        let text =
            "segment_id,timestamp,speed_mph\nT1,2022-08-21T15:00,50\nT1,2022-08-21T15:00,55\n";
        let p = speeds_from_csv(text, "speed_mph").unwrap();
        assert_eq!(p.series[0].samples.len(), 1);
        assert_eq!(p.series[0].samples[0].speed, 55.0);
        assert_eq!(p.duplicates, 1);
    }

    #[test]
    fn zero_speed_dropped() {
        let text =
            "segment_id,timestamp,speed_mph\nT1,2022-08-21T15:00,0\nT1,2022-08-21T16:00,30\n";
        let p = speeds_from_csv(text, "speed_mph").unwrap();
        assert_eq!(p.dropped_nonpositive, 1);
        assert_eq!(p.series[0].samples.len(), 1);
    }

    #[test]
    fn bad_timestamp_is_row_error() {
        let text = "segment_id,timestamp,speed_mph\nT1,2022-08-21T15:00,40\nT1,yesterday,30\n";
        let err = speeds_from_csv(text, "speed_mph").unwrap_err();
        assert!(matches!(err, IngestError::Row { index: 2, .. }), "{err}");
    }

    fn report_line(subtype: &str, reliability: f64, end: &str) -> String {
        format!(
            r#"{{"id":"r1","subtype":"{subtype}","lat":32.8,"lon":-96.8,"start":"2022-08-21T15:10","end":"{end}","road_name":"Main St","direction":"N","reliability":{reliability}}}"#
        )
    }

    #[test]
    fn report_subtypes_map() {
        let r = reports_from_ndjson(&report_line("Heavy Rain", 6.0, "2022-08-21T17:00")).unwrap();
        assert_eq!(r[0].event_type, crate::model::EventType::Flood);
        let r = reports_from_ndjson(&report_line("Road Icy", 6.0, "2022-08-21T17:00")).unwrap();
        assert_eq!(r[0].event_type, crate::model::EventType::WinterStorm);
    }

    #[test]
    fn report_errors() {
        let err = reports_from_ndjson(&report_line("Flood", 11.0, "2022-08-21T17:00")).unwrap_err();
        assert!(matches!(
            err,
            IngestError::Model {
                source: ModelError::Reliability(_),
                ..
            }
        ));
        let err = reports_from_ndjson(&report_line("Flood", 5.0, "2022-08-21T12:00")).unwrap_err();
        assert!(matches!(
            err,
            IngestError::Model {
                source: ModelError::EndBeforeStart,
                ..
            }
        ));
    }

    fn simple_link(
        id: &str,
        tmc: &str,
        len: f64,
        lanes: LaneCategory,
        alt: f64,
        lon0: f64,
    ) -> RoadLink {
        let g = Polyline::new(vec![
            LatLon {
                lat: 0.0,
                lon: lon0,
            },
            LatLon {
                lat: 0.0,
                lon: lon0 + 0.01,
            },
        ])
        .unwrap();
        RoadLink::new(
            id,
            Some(tmc.into()),
            g,
            Some(len),
            LinkAttributes {
                functional_class: FunctionalClass::Arterial,
                lane_category: lanes,
                divider: Divider::NoDivider,
                is_intersection: false,
                is_frontage: false,
                min_altitude: alt,
                slope: 1.0,
                road_name: "Main St".into(),
                direction_tag: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn conflation_weighted_mode_and_mean() {
        let links = vec![
            simple_link("a", "T", 1.0, LaneCategory::One, 10.0, 0.0),
            simple_link("b", "T", 3.0, LaneCategory::TwoThree, 20.0, 0.01),
        ];
        let out = conflate_by_tmc(&links).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].lane_category, LaneCategory::TwoThree);
        assert!((out[0].min_altitude - 17.5).abs() < 1e-12);
        assert!((out[0].length - 4.0).abs() < 1e-12);
        assert_eq!(out[0].geometry.points().len(), 3);
    }

    #[test]
    fn conflation_tie_breaks_lexicographically() {
        let links = vec![
            simple_link("a", "T", 2.0, LaneCategory::TwoThree, 10.0, 0.0),
            simple_link("b", "T", 2.0, LaneCategory::One, 10.0, 0.01),
        ];
        // "1" < "2-3"
        assert_eq!(
            conflate_by_tmc(&links).unwrap()[0].lane_category,
            LaneCategory::One
        );
    }

    #[test]
    fn single_link_group_is_identity() {
        let l = simple_link("T", "T", 2.0, LaneCategory::One, 10.0, 0.0);
        assert_eq!(conflate_by_tmc(std::slice::from_ref(&l)).unwrap()[0], l);
    }

    #[test]
    fn conflation_requires_tmc() {
        let mut l = simple_link("a", "T", 2.0, LaneCategory::One, 10.0, 0.0);
        l.tmc_code = None;
        assert!(matches!(
            conflate_by_tmc(&[l]),
            Err(IngestError::MissingTmc(_))
        ));
    }

    proptest! {
        #[test]
        fn conflation_conserves_length_and_ignores_order(
            lens in proptest::collection::vec(0.01f64..5.0, 2..6),
            alts in proptest::collection::vec(0.0f64..30.0, 6),
            rot in 0usize..6,
        ) {
            let links: Vec<RoadLink> = lens.iter().enumerate()
                .map(|(i, &len)| simple_link(&format!("l{i}"), "T", len, LaneCategory::One, alts[i], i as f64 * 0.01))
                .collect();
            let mut rotated = links.clone();
            rotated.rotate_left(rot % links.len());
            let a = conflate_by_tmc(&links).unwrap();
            let b = conflate_by_tmc(&rotated).unwrap();
            let total: f64 = lens.iter().sum();
            prop_assert!((a[0].length - total).abs() < 1e-9);
            prop_assert_eq!(a[0].min_altitude, b[0].min_altitude);
            prop_assert_eq!(a[0].slope, b[0].slope);
        }
    }
}
