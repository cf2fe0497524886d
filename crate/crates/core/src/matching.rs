//! Attach point event reports to road links.
//!
//! A report matches a link when it lies strictly within the distance gate of
//! the link centerline, the travel directions agree and the normalized road
//! names are equal. Candidates come from a uniform 0.01° grid index; among
//! surviving candidates the nearest wins, ties going to the smallest link id.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{angular_difference, normalize_name, EventReport, LatLon, Polyline, RoadLink};

/// Grid cell edge, degrees.
pub const CELL_DEG: f64 = 0.01;

const WGS84_A: f64 = 6_378_137.0;
const WGS84_E2: f64 = 6.694_379_990_141_317e-3;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("cannot match reports against an empty link set")]
    NoLinks,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchGates {
    /// Reports must be strictly closer than this, meters.
    pub distance_m: f64,
    /// Maximum bearing disagreement when only a bearing is available, degrees.
    pub bearing_tolerance_deg: f64,
}

impl Default for MatchGates {
    fn default() -> Self {
        MatchGates {
            distance_m: 10.0,
            bearing_tolerance_deg: 30.0,
        }
    }
}

impl MatchGates {
    pub fn within_distance(&self, d: f64) -> bool {
        d < self.distance_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchFailure {
    TooFar,
    DirectionMismatch,
    NameMismatch,
    NoCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub report_id: String,
    pub link_id: Option<String>,
    /// Distance to the matched link, or to the nearest candidate on failure.
    pub distance_m: Option<f64>,
    pub failure_reason: Option<MatchFailure>,
}

impl MatchResult {
    pub fn is_matched(&self) -> bool {
        self.link_id.is_some()
    }
}

/// Meridional and prime-vertical radii of curvature at a latitude.
fn local_radii(lat_deg: f64) -> (f64, f64) {
    let s = lat_deg.to_radians().sin();
    let w = 1.0 - WGS84_E2 * s * s;
    let m = WGS84_A * (1.0 - WGS84_E2) / w.powf(1.5);
    let n = WGS84_A / w.sqrt();
    (m, n)
}

/// Minimum distance in meters from `p` to any segment of `geometry`,
/// measured in a local equirectangular projection centered at `p`.
pub fn point_to_polyline_distance(p: LatLon, geometry: &Polyline) -> f64 {
    let (m, n) = local_radii(p.lat);
    let kx = n * p.lat.to_radians().cos() * std::f64::consts::PI / 180.0;
    let ky = m * std::f64::consts::PI / 180.0;
    let project = |q: &LatLon| {
        let dlon = (q.lon - p.lon + 540.0).rem_euclid(360.0) - 180.0;
        (dlon * kx, (q.lat - p.lat) * ky)
    };
    geometry
        .points()
        .windows(2)
        .map(|w| {
            let (ax, ay) = project(&w[0]);
            let (bx, by) = project(&w[1]);
            segment_distance_to_origin(ax, ay, bx, by)
        })
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance_to_origin(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (-(ax * dx + ay * dy) / len2).clamp(0.0, 1.0)
    };
    let (x, y) = (ax + t * dx, ay + t * dy);
    x.hypot(y)
}

fn cell_of(p: &LatLon) -> (i64, i64) {
    (
        (p.lat / CELL_DEG).floor() as i64,
        (p.lon / CELL_DEG).floor() as i64,
    )
}

/// Uniform-grid spatial index over link geometries.
pub struct LinkIndex<'a> {
    links: &'a [RoadLink],
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> LinkIndex<'a> {
    pub fn build(links: &'a [RoadLink]) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, link) in links.iter().enumerate() {
            for w in link.geometry.points().windows(2) {
                let (a, b) = (cell_of(&w[0]), cell_of(&w[1]));
                for ci in a.0.min(b.0)..=a.0.max(b.0) {
                    for cj in a.1.min(b.1)..=a.1.max(b.1) {
                        let v = cells.entry((ci, cj)).or_default();
                        if v.last() != Some(&i) {
                            v.push(i);
                        }
                    }
                }
            }
        }
        LinkIndex { links, cells }
    }

    pub fn links(&self) -> &'a [RoadLink] {
        self.links
    }

    /// Links with a segment in the cell containing `p` or one of its neighbors.
    pub fn candidates(&self, p: &LatLon) -> Vec<&'a RoadLink> {
        let (ci, cj) = cell_of(p);
        let mut idx = BTreeSet::new();
        for di in -1..=1 {
            for dj in -1..=1 {
                if let Some(v) = self.cells.get(&(ci + di, cj + dj)) {
                    idx.extend(v.iter().copied());
                }
            }
        }
        idx.into_iter().map(|i| &self.links[i]).collect()
    }
}

/// Canonical form of a direction tag: cardinal synonyms collapse to
/// `n`, `ne`, ... ; anything else is just name-normalized.
pub fn canonical_direction(tag: &str) -> String {
    let t = normalize_name(tag).replace(' ', "");
    let t = t.strip_suffix("bound").map(str::to_string).unwrap_or(t);
    let canon = match t.as_str() {
        "n" | "north" | "nb" => "n",
        "ne" | "northeast" => "ne",
        "e" | "east" | "eb" => "e",
        "se" | "southeast" => "se",
        "s" | "south" | "sb" => "s",
        "sw" | "southwest" => "sw",
        "w" | "west" | "wb" => "w",
        "nw" | "northwest" => "nw",
        _ => return t,
    };
    canon.to_string()
}

/// Bearing implied by a direction tag: a cardinal direction or a number of
/// degrees.
pub fn bearing_proxy(tag: &str) -> Option<f64> {
    let c = canonical_direction(tag);
    let deg = match c.as_str() {
        "n" => 0.0,
        "ne" => 45.0,
        "e" => 90.0,
        "se" => 135.0,
        "s" => 180.0,
        "sw" => 225.0,
        "w" => 270.0,
        "nw" => 315.0,
        other => other.parse::<f64>().ok().filter(|d| d.is_finite())?,
    };
    Some(deg.rem_euclid(360.0))
}

fn direction_ok(report: &EventReport, link: &RoadLink, gates: &MatchGates) -> bool {
    match (&report.direction_tag, &link.direction_tag) {
        (Some(r), Some(l)) => canonical_direction(r) == canonical_direction(l),
        (Some(r), None) => match bearing_proxy(r) {
            Some(b) => angular_difference(b, link.bearing) <= gates.bearing_tolerance_deg,
            None => true,
        },
        _ => true,
    }
}

/// Apply the distance, direction and name rules to one report.
pub fn match_report(
    report: &EventReport,
    index: &LinkIndex<'_>,
    gates: &MatchGates,
) -> MatchResult {
    let fail = |reason, d| MatchResult {
        report_id: report.report_id.clone(),
        link_id: None,
        distance_m: d,
        failure_reason: Some(reason),
    };
    let mut cands: Vec<(f64, &RoadLink)> = index
        .candidates(&report.location)
        .into_iter()
        .map(|l| (point_to_polyline_distance(report.location, &l.geometry), l))
        .collect();
    if cands.is_empty() {
        return fail(MatchFailure::NoCandidate, None);
    }
    let by_distance = |a: &(f64, &RoadLink), b: &(f64, &RoadLink)| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1.link_id.cmp(&b.1.link_id))
    };
    cands.sort_by(by_distance);
    let nearest = cands[0].0;

    cands.retain(|(d, _)| gates.within_distance(*d));
    if cands.is_empty() {
        return fail(MatchFailure::TooFar, Some(nearest));
    }
    let near_gate = cands[0].0;
    cands.retain(|(_, l)| direction_ok(report, l, gates));
    if cands.is_empty() {
        return fail(MatchFailure::DirectionMismatch, Some(near_gate));
    }
    let near_dir = cands[0].0;
    cands.retain(|(_, l)| l.road_name == report.road_name);
    match cands.first() {
        None => fail(MatchFailure::NameMismatch, Some(near_dir)),
        Some((d, l)) => MatchResult {
            report_id: report.report_id.clone(),
            link_id: Some(l.link_id.clone()),
            distance_m: Some(*d),
            failure_reason: None,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSummary {
    /// Ordered by report id.
    pub results: Vec<MatchResult>,
    /// `None` when there were no reports.
    pub match_rate: Option<f64>,
}

impl MatchSummary {
    pub fn matched(&self) -> usize {
        self.results.iter().filter(|r| r.is_matched()).count()
    }

    pub fn failures(&self, reason: MatchFailure) -> usize {
        self.results
            .iter()
            .filter(|r| r.failure_reason == Some(reason))
            .count()
    }
}

pub fn match_all(
    reports: &[EventReport],
    links: &[RoadLink],
    gates: &MatchGates,
) -> Result<MatchSummary, MatchError> {
    if links.is_empty() {
        return Err(MatchError::NoLinks);
    }
    let index = LinkIndex::build(links);
    let mut results: Vec<MatchResult> = reports
        .par_iter()
        .map(|r| match_report(r, &index, gates))
        .collect();
    results.sort_by(|a, b| a.report_id.cmp(&b.report_id));
    let matched = results.iter().filter(|r| r.is_matched()).count();
    let match_rate = (!results.is_empty()).then(|| matched as f64 / results.len() as f64);
    Ok(MatchSummary {
        results,
        match_rate,
    })
}
