//! Shared domain types: road links, hourly speed series, crowdsourced event
//! reports, baseline profiles and per-link resilience metrics.
//!
//! Everything here is an immutable value once constructed. The only
//! computation is derived geometry (bearing and great-circle length).

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Hour, Span};

/// Mean earth radius (IUGG), meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;
pub const METERS_PER_MILE: f64 = 1_609.344;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    BadCoordinate { lat: f64, lon: f64 },
    #[error("geometry needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate geometry: first and last points coincide")]
    DegenerateGeometry,
    #[error("link length must be positive, got {0}")]
    NonPositiveLength(f64),
    #[error("invalid {kind} literal `{literal}`")]
    InvalidLiteral { kind: &'static str, literal: String },
    #[error("reliability {0} outside [0, 10]")]
    Reliability(f64),
    #[error("end time precedes start time")]
    EndBeforeStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Result<Self, ModelError> {
        if !(lat.is_finite() && lon.is_finite())
            || !(-90.0..=90.0).contains(&lat)
            || !(-180.0..=180.0).contains(&lon)
        {
            return Err(ModelError::BadCoordinate { lat, lon });
        }
        Ok(LatLon { lat, lon })
    }

    fn unit_vector(&self) -> [f64; 3] {
        let (phi, lam) = (self.lat.to_radians(), self.lon.to_radians());
        [phi.cos() * lam.cos(), phi.cos() * lam.sin(), phi.sin()]
    }
}

/// Great-circle distance in meters (haversine, spherical earth).
pub fn haversine_m(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Ordered list of points, at least two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline(Vec<LatLon>);

impl Polyline {
    pub fn new(points: Vec<LatLon>) -> Result<Self, ModelError> {
        if points.len() < 2 {
            return Err(ModelError::TooFewPoints(points.len()));
        }
        for p in &points {
            LatLon::new(p.lat, p.lon)?;
        }
        Ok(Polyline(points))
    }

    pub fn points(&self) -> &[LatLon] {
        &self.0
    }

    pub fn first(&self) -> LatLon {
        self.0[0]
    }

    pub fn last(&self) -> LatLon {
        self.0[self.0.len() - 1]
    }

    pub fn reversed(&self) -> Polyline {
        Polyline(self.0.iter().rev().copied().collect())
    }

    /// Summed great-circle length of all segments, miles.
    pub fn length_miles(&self) -> f64 {
        self.0
            .windows(2)
            .map(|w| haversine_m(w[0], w[1]))
            .sum::<f64>()
            / METERS_PER_MILE
    }

    /// Point halfway along the great circle between first and last points.
    pub fn midpoint(&self) -> LatLon {
        let (a, b) = (self.first().unit_vector(), self.last().unit_vector());
        let m = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
        let r = (m[0] * m[0] + m[1] * m[1]).sqrt();
        if r == 0.0 && m[2] == 0.0 {
            return self.first();
        }
        LatLon {
            lat: m[2].atan2(r).to_degrees(),
            lon: m[1].atan2(m[0]).to_degrees(),
        }
    }

    /// Concatenate several polylines in order, dropping repeated join points.
    pub fn concat<'a>(
        parts: impl IntoIterator<Item = &'a Polyline>,
    ) -> Result<Polyline, ModelError> {
        let mut out: Vec<LatLon> = Vec::new();
        for part in parts {
            for p in part.points() {
                if out.last() != Some(p) {
                    out.push(*p);
                }
            }
        }
        if out.len() == 1 {
            out.push(out[0]);
        }
        Polyline::new(out)
    }
}

/// Bearing of a polyline from its first to its last point, degrees in [0, 360).
///
/// The azimuth is taken at the midpoint of the great-circle arc joining the
/// endpoints, which makes the value exactly antipodal (±180°) under
/// reversal of the point order.
pub fn derive_bearing(geometry: &Polyline) -> Result<f64, ModelError> {
    let (a, b) = (geometry.first(), geometry.last());
    let (ua, ub) = (a.unit_vector(), b.unit_vector());
    let chord = [ub[0] - ua[0], ub[1] - ua[1], ub[2] - ua[2]];
    if chord.iter().all(|c| c.abs() < 1e-15) {
        return Err(ModelError::DegenerateGeometry);
    }
    let m = geometry.midpoint();
    let (phi, lam) = (m.lat.to_radians(), m.lon.to_radians());
    let east = [-lam.sin(), lam.cos(), 0.0];
    let north = [-phi.sin() * lam.cos(), -phi.sin() * lam.sin(), phi.cos()];
    let dot = |u: &[f64; 3], v: &[f64; 3]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let deg = dot(&chord, &east).atan2(dot(&chord, &north)).to_degrees();
    Ok(normalize_degrees(deg))
}

pub fn normalize_degrees(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

/// Smallest absolute angular difference, degrees in [0, 180].
pub fn angular_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Lowercase, strip punctuation, collapse whitespace.
pub fn normalize_name(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else if c.is_whitespace() {
                ' '
            } else {
                '\u{0}'
            }
        })
        .filter(|&c| c != '\u{0}')
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn literal_key(s: &str) -> String {
    s.trim().to_ascii_lowercase().replace([' ', '-', '_'], "")
}

macro_rules! literal_enum {
    ($name:ident, $kind:literal, { $($variant:ident => $canon:literal [$($alias:literal),*]),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "&'static str")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $canon),+
                }
            }
        }

        impl FromStr for $name {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let key = literal_key(s);
                $(
                    if key == literal_key($canon) || key == literal_key(stringify!($variant))
                        $(|| key == literal_key($alias))* {
                        return Ok($name::$variant);
                    }
                )+
                Err(ModelError::InvalidLiteral { kind: $kind, literal: s.to_string() })
            }
        }

        impl TryFrom<String> for $name {
            type Error = ModelError;
            fn try_from(s: String) -> Result<Self, Self::Error> {
                s.parse()
            }
        }

        impl From<$name> for &'static str {
            fn from(v: $name) -> &'static str {
                v.as_str()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

literal_enum!(FunctionalClass, "functional class", {
    Freeway => "freeway" ["fc1", "1"],
    Arterial => "arterial" ["fc2", "2"],
    Collector => "collector" ["fc3", "3"],
    LocalStreet => "local_street" ["local", "fc4", "4"],
});

literal_enum!(LaneCategory, "lane category", {
    One => "1" ["one", "1lane"],
    TwoThree => "2-3" ["twothree", "2to3", "23lanes"],
    FourPlus => "4+" ["fourplus", ">3", "4ormore"],
});

literal_enum!(Divider, "divider", {
    NoDivider => "none" ["nodivider", "n"],
    Legal => "legal" ["legaldivider", "l"],
    Physical => "physical" ["physicaldivider", "p"],
});

literal_enum!(EventType, "event type", {
    Flood => "flood" [],
    WinterStorm => "winter_storm" ["winter", "snow"],
    Fog => "fog" [],
    Other => "other" [],
});

impl EventType {
    /// Map a crowdsourced report subtype onto an event type. Total: unknown
    /// subtypes map to [`EventType::Other`].
    pub fn from_subtype(raw: &str) -> EventType {
        match normalize_name(raw).as_str() {
            "flood" | "heavy rain" => EventType::Flood,
            "road icy" | "heavy snow" => EventType::WinterStorm,
            "fog" => EventType::Fog,
            _ => EventType::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadLink {
    pub link_id: String,
    pub tmc_code: Option<String>,
    pub geometry: Polyline,
    /// Miles.
    pub length: f64,
    /// Degrees in [0, 360).
    pub bearing: f64,
    pub functional_class: FunctionalClass,
    pub lane_category: LaneCategory,
    pub divider: Divider,
    pub is_intersection: bool,
    pub is_frontage: bool,
    /// Kilometers.
    pub min_altitude: f64,
    pub slope: f64,
    pub road_name: String,
    pub direction_tag: Option<String>,
}

/// Attributes of a link other than identity and geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkAttributes {
    pub functional_class: FunctionalClass,
    pub lane_category: LaneCategory,
    pub divider: Divider,
    pub is_intersection: bool,
    pub is_frontage: bool,
    pub min_altitude: f64,
    pub slope: f64,
    pub road_name: String,
    pub direction_tag: Option<String>,
}

impl RoadLink {
    /// Build a link, deriving bearing and (when not given) length from geometry.
    pub fn new(
        link_id: impl Into<String>,
        tmc_code: Option<String>,
        geometry: Polyline,
        length: Option<f64>,
        attrs: LinkAttributes,
    ) -> Result<Self, ModelError> {
        let length = length.unwrap_or_else(|| geometry.length_miles());
        if !(length > 0.0) || !length.is_finite() {
            return Err(ModelError::NonPositiveLength(length));
        }
        let bearing = derive_bearing(&geometry)?;
        Ok(RoadLink {
            link_id: link_id.into(),
            tmc_code,
            geometry,
            length,
            bearing,
            functional_class: attrs.functional_class,
            lane_category: attrs.lane_category,
            divider: attrs.divider,
            is_intersection: attrs.is_intersection,
            is_frontage: attrs.is_frontage,
            min_altitude: attrs.min_altitude,
            slope: attrs.slope,
            road_name: normalize_name(&attrs.road_name),
            direction_tag: attrs
                .direction_tag
                .map(|d| normalize_name(&d))
                .filter(|d| !d.is_empty()),
        })
    }

    pub fn attributes(&self) -> LinkAttributes {
        LinkAttributes {
            functional_class: self.functional_class,
            lane_category: self.lane_category,
            divider: self.divider,
            is_intersection: self.is_intersection,
            is_frontage: self.is_frontage,
            min_altitude: self.min_altitude,
            slope: self.slope,
            road_name: self.road_name.clone(),
            direction_tag: self.direction_tag.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedSample {
    pub hour: Hour,
    /// mph, > 0.
    pub speed: f64,
}

/// Hourly observed speeds of one link; missing hours are simply absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedSeries {
    pub link_id: String,
    pub samples: Vec<SpeedSample>,
}

impl SpeedSeries {
    pub fn speed_at(&self, hour: Hour) -> Option<f64> {
        self.samples
            .binary_search_by_key(&hour, |s| s.hour)
            .ok()
            .map(|i| self.samples[i].speed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    pub report_id: String,
    pub event_type: EventType,
    pub raw_subtype: String,
    pub location: LatLon,
    pub start_time: NaiveDateTime,
    pub end_time: NaiveDateTime,
    pub road_name: String,
    pub direction_tag: Option<String>,
    /// In [0, 10].
    pub reliability: f64,
}

impl EventReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        report_id: impl Into<String>,
        raw_subtype: impl Into<String>,
        location: LatLon,
        start_time: NaiveDateTime,
        end_time: NaiveDateTime,
        road_name: &str,
        direction_tag: Option<&str>,
        reliability: f64,
    ) -> Result<Self, ModelError> {
        if !(0.0..=10.0).contains(&reliability) {
            return Err(ModelError::Reliability(reliability));
        }
        if end_time < start_time {
            return Err(ModelError::EndBeforeStart);
        }
        let raw_subtype = raw_subtype.into();
        Ok(EventReport {
            report_id: report_id.into(),
            event_type: EventType::from_subtype(&raw_subtype),
            raw_subtype,
            location: LatLon::new(location.lat, location.lon)?,
            start_time,
            end_time,
            road_name: normalize_name(road_name),
            direction_tag: direction_tag.map(normalize_name).filter(|d| !d.is_empty()),
            reliability,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselineCell {
    /// Mean speed; meaningful only when `n_obs > 0`.
    pub mean_speed: Option<f64>,
    pub n_obs: usize,
}

/// Expected speed by hour of week, with an hour-of-day fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineProfile {
    pub link_id: String,
    pub hour_of_week: Vec<BaselineCell>,
    pub hour_of_day: Vec<BaselineCell>,
    /// Total eligible samples used.
    pub n_eligible: usize,
    /// Too few eligible samples; the link is excluded from metrics.
    pub insufficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceMetrics {
    pub link_id: String,
    pub event_id: String,
    pub window: Option<Span>,
    pub duration_hours: f64,
    pub change_pct: f64,
    pub auc_pct_hours: f64,
    pub affected: bool,
    pub low_coverage: bool,
    pub baseline_insufficient: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(a: (f64, f64), b: (f64, f64)) -> Polyline {
        Polyline::new(vec![
            LatLon::new(a.0, a.1).unwrap(),
            LatLon::new(b.0, b.1).unwrap(),
        ])
        .unwrap()
    }

    // Standalone spherical oracle: classic midpoint formula followed by the
    // forward-azimuth formula from the midpoint toward the end point.
    fn oracle_bearing(a: (f64, f64), b: (f64, f64)) -> f64 {
        let (p1, l1) = (a.0.to_radians(), a.1.to_radians());
        let (p2, l2) = (b.0.to_radians(), b.1.to_radians());
        let bx = p2.cos() * (l2 - l1).cos();
        let by = p2.cos() * (l2 - l1).sin();
        let pm = (p1.sin() + p2.sin()).atan2(((p1.cos() + bx).powi(2) + by * by).sqrt());
        let lm = l1 + by.atan2(p1.cos() + bx);
        let dl = l2 - lm;
        let y = dl.sin() * p2.cos();
        let x = pm.cos() * p2.sin() - pm.sin() * p2.cos() * dl.cos();
        y.atan2(x).to_degrees().rem_euclid(360.0)
    }

    #[test]
    fn bearing_axis_aligned() {
        assert!((derive_bearing(&line((0.0, 0.0), (1.0, 0.0))).unwrap() - 0.0).abs() < 1e-12);
        assert!((derive_bearing(&line((0.0, 0.0), (0.0, 1.0))).unwrap() - 90.0).abs() < 1e-12);
        assert!((derive_bearing(&line((0.0, 0.0), (-1.0, 0.0))).unwrap() - 180.0).abs() < 1e-12);
    }

    #[test]
    fn bearing_diagonal_matches_oracle() {
        let b = derive_bearing(&line((0.0, 0.0), (1.0, 1.0))).unwrap();
        let o = oracle_bearing((0.0, 0.0), (1.0, 1.0));
        assert!((b - o).abs() < 1e-9, "{b} vs {o}");
        assert!((b - 45.0).abs() < 0.01);
    }

    #[test]
    fn bearing_degenerate_errors() {
        let p = Polyline::new(vec![LatLon::new(1.0, 1.0).unwrap(); 3]).unwrap();
        assert_eq!(derive_bearing(&p), Err(ModelError::DegenerateGeometry));
    }

    #[test]
    fn polyline_needs_two_points() {
        assert!(Polyline::new(vec![LatLon::new(0.0, 0.0).unwrap()]).is_err());
        assert!(LatLon::new(91.0, 0.0).is_err());
        assert!(LatLon::new(0.0, -180.5).is_err());
    }

    #[test]
    fn subtype_mapping() {
        assert_eq!(EventType::from_subtype("Heavy Rain"), EventType::Flood);
        assert_eq!(EventType::from_subtype("Flood"), EventType::Flood);
        assert_eq!(EventType::from_subtype("Road Icy"), EventType::WinterStorm);
        assert_eq!(
            EventType::from_subtype("HEAVY  snow"),
            EventType::WinterStorm
        );
        assert_eq!(EventType::from_subtype("Fog"), EventType::Fog);
        assert_eq!(EventType::from_subtype("Hail"), EventType::Other);
        assert_eq!(EventType::from_subtype(""), EventType::Other);
    }

    #[test]
    fn name_normalization() {
        assert_eq!(normalize_name("  Main   St. "), "main st");
        assert_eq!(normalize_name("I-35E"), "i35e");
        assert_eq!(normalize_name("Oak\tAve"), "oak ave");
    }

    #[test]
    fn enum_literals() {
        assert_eq!(
            "Local Street".parse::<FunctionalClass>().unwrap(),
            FunctionalClass::LocalStreet
        );
        assert_eq!(
            "2-3".parse::<LaneCategory>().unwrap(),
            LaneCategory::TwoThree
        );
        assert_eq!("physical".parse::<Divider>().unwrap(), Divider::Physical);
        let err = "motorway".parse::<FunctionalClass>().unwrap_err();
        assert!(err.to_string().contains("motorway"));
    }

    #[test]
    fn enums_round_trip_through_serde() {
        for v in FunctionalClass::ALL {
            let s = serde_json::to_string(v).unwrap();
            assert_eq!(&serde_json::from_str::<FunctionalClass>(&s).unwrap(), v);
        }
        for v in LaneCategory::ALL {
            let s = serde_json::to_string(v).unwrap();
            assert_eq!(&serde_json::from_str::<LaneCategory>(&s).unwrap(), v);
        }
        for v in Divider::ALL {
            let s = serde_json::to_string(v).unwrap();
            assert_eq!(&serde_json::from_str::<Divider>(&s).unwrap(), v);
        }
        for v in EventType::ALL {
            let s = serde_json::to_string(v).unwrap();
            assert_eq!(&serde_json::from_str::<EventType>(&s).unwrap(), v);
        }
    }

    #[test]
    fn report_invariants() {
        let t0 = crate::time::parse_local("2022-08-21T15:00").unwrap();
        let t1 = crate::time::parse_local("2022-08-21T14:00").unwrap();
        let loc = LatLon::new(32.8, -96.8).unwrap();
        assert!(EventReport::new("r", "Flood", loc, t0, t1, "x", None, 5.0).is_err());
        assert!(EventReport::new("r", "Flood", loc, t0, t0, "x", None, 11.0).is_err());
        assert!(EventReport::new("r", "Flood", loc, t0, t0, "x", None, 10.0).is_ok());
    }

    proptest! {
        #[test]
        fn reversing_flips_bearing(
            lat1 in -80.0f64..80.0, lon1 in -179.0f64..179.0,
            dlat in -1.0f64..1.0, dlon in -1.0f64..1.0,
        ) {
            prop_assume!(dlat.abs() + dlon.abs() > 1e-6);
            let p = line((lat1, lon1), (lat1 + dlat, lon1 + dlon));
            let fwd = derive_bearing(&p).unwrap();
            let rev = derive_bearing(&p.reversed()).unwrap();
            prop_assert!(angular_difference(fwd + 180.0, rev) < 1e-9);
        }

        #[test]
        fn subtype_mapping_is_total(s in ".*") {
            let t = EventType::from_subtype(&s);
            prop_assert!(EventType::ALL.contains(&t));
        }
    }
}
