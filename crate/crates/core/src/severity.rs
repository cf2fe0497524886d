//! User-perceived severity, hourly report intensity, report windows and
//! network-wide mean change.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{EventReport, EventType, RoadLink};
use crate::resilience::ChangeSeries;
use crate::time::{Hour, Span};

/// Reports per hour above which intensity is heavy.
pub const HEAVY_ABOVE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsRecord {
    pub link_id: String,
    pub event_type: EventType,
    /// Reliability-weighted reports per mile, scaled by 1/10.
    pub ups: f64,
    pub report_count: usize,
}

/// `Σw / (10·L)` with `L` in miles.
pub fn ups_value(weights: impl IntoIterator<Item = f64>, length_miles: f64) -> f64 {
    weights.into_iter().sum::<f64>() / (10.0 * length_miles)
}

/// Severity on `link` from reports already matched to it.
pub fn ups(link: &RoadLink, event_type: EventType, reports: &[&EventReport]) -> UpsRecord {
    ups_with_length(&link.link_id, link.length, event_type, reports)
}

pub fn ups_with_length(
    link_id: &str,
    length_miles: f64,
    event_type: EventType,
    reports: &[&EventReport],
) -> UpsRecord {
    UpsRecord {
        link_id: link_id.to_string(),
        event_type,
        ups: ups_value(reports.iter().map(|r| r.reliability), length_miles),
        report_count: reports.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intensity {
    None,
    Light,
    Heavy,
}

impl Intensity {
    pub fn from_count(n: usize) -> Intensity {
        match n {
            0 => Intensity::None,
            n if n <= HEAVY_ABOVE => Intensity::Light,
            _ => Intensity::Heavy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityLabel {
    pub hour: Hour,
    pub event_type: EventType,
    pub report_count: usize,
    pub label: Intensity,
}

/// One label per hour of `span` per event type, counting reports by the hour
/// of their start time. Ordered by hour, then event type.
pub fn classify_hours(
    reports: &[EventReport],
    span: Span,
    event_types: &[EventType],
) -> Vec<IntensityLabel> {
    let mut counts: BTreeMap<(Hour, EventType), usize> = BTreeMap::new();
    for r in reports {
        let h = Hour::floor(&r.start_time);
        if span.contains(h) {
            *counts.entry((h, r.event_type)).or_default() += 1;
        }
    }
    let mut types = event_types.to_vec();
    types.sort();
    types.dedup();
    span.iter()
        .flat_map(|h| {
            let counts = &counts;
            types.iter().map(move |&t| {
                let n = counts.get(&(h, t)).copied().unwrap_or(0);
                IntensityLabel {
                    hour: h,
                    event_type: t,
                    report_count: n,
                    label: Intensity::from_count(n),
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportWindow {
    pub first: Hour,
    pub last: Hour,
    pub count: usize,
    pub duration_h: i64,
}

impl ReportWindow {
    pub fn span(&self) -> Span {
        Span::new(self.first, self.last)
    }
}

/// Floor of the earliest start to ceiling of the latest end.
pub fn report_window(reports: &[EventReport]) -> Option<ReportWindow> {
    let first = reports.iter().map(|r| r.start_time).min()?;
    let last = reports.iter().map(|r| r.end_time).max()?;
    let (first, last) = (Hour::floor(&first), Hour::ceil(&last));
    Some(ReportWindow {
        first,
        last,
        count: reports.len(),
        duration_h: last.hours_since(first),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkPoint {
    pub hour: Hour,
    pub mean_change: f64,
    pub contributors: usize,
}

/// Unweighted hourly mean of the available per-series changes. Hours with no
/// contributor are omitted.
pub fn network_aggregate(series: &[ChangeSeries]) -> Vec<NetworkPoint> {
    let mut acc: BTreeMap<Hour, (f64, usize)> = BTreeMap::new();
    let mut ordered: Vec<&ChangeSeries> = series.iter().collect();
    ordered.sort_by(|a, b| a.link_id.cmp(&b.link_id));
    for s in ordered {
        for p in &s.samples {
            let e = acc.entry(p.hour).or_default();
            e.0 += p.f;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(hour, (sum, n))| NetworkPoint {
            hour,
            mean_change: sum / n as f64,
            contributors: n,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LatLon;
    use crate::resilience::ChangeSample;
    use crate::time::parse_local;
    use proptest::prelude::*;

    fn rep(id: &str, subtype: &str, start: &str, end: &str, w: f64) -> EventReport {
        EventReport::new(
            id,
            subtype,
            LatLon {
                lat: 32.8,
                lon: -96.8,
            },
            parse_local(start).unwrap(),
            parse_local(end).unwrap(),
            "main st",
            None,
            w,
        )
        .unwrap()
    }

    #[test]
    fn ups_examples() {
        let a = rep("a", "Flood", "2022-08-22T10:00", "2022-08-22T11:00", 10.0);
        assert_eq!(ups_with_length("l", 1.0, EventType::Flood, &[&a]).ups, 1.0);
        let b = rep("b", "Flood", "2022-08-22T10:00", "2022-08-22T11:00", 5.0);
        let c = rep("c", "Flood", "2022-08-22T10:00", "2022-08-22T11:00", 5.0);
        let r = ups_with_length("l", 0.5, EventType::Flood, &[&b, &c]);
        assert_eq!((r.ups, r.report_count), (2.0, 2));
        let z = ups_with_length("l", 0.5, EventType::Flood, &[]);
        assert_eq!((z.ups, z.report_count), (0.0, 0));
    }

    #[test]
    fn intensity_thresholds() {
        assert_eq!(Intensity::from_count(0), Intensity::None);
        assert_eq!(Intensity::from_count(1), Intensity::Light);
        assert_eq!(Intensity::from_count(5), Intensity::Light);
        assert_eq!(Intensity::from_count(10), Intensity::Light);
        assert_eq!(Intensity::from_count(11), Intensity::Heavy);
    }

    #[test]
    fn classify_counts_by_start_hour() {
        let mut reports: Vec<EventReport> = (0..11)
            .map(|i| {
                rep(
                    &format!("f{i}"),
                    "Flood",
                    "2022-08-22T10:15",
                    "2022-08-22T13:00",
                    5.0,
                )
            })
            .collect();
        reports.extend((0..5).map(|i| {
            rep(
                &format!("s{i}"),
                "Heavy snow",
                "2022-08-22T11:59",
                "2022-08-22T12:30",
                5.0,
            )
        }));
        let span = Span::new(
            Hour::parse("2022-08-22T09:00").unwrap(),
            Hour::parse("2022-08-22T13:00").unwrap(),
        );
        let labels = classify_hours(&reports, span, &[EventType::WinterStorm, EventType::Flood]);
        assert_eq!(labels.len(), 8);
        let get = |h: &str, t| {
            labels
                .iter()
                .find(|l| l.hour == Hour::parse(h).unwrap() && l.event_type == t)
                .unwrap()
                .label
        };
        assert_eq!(get("2022-08-22T10:00", EventType::Flood), Intensity::Heavy);
        assert_eq!(
            get("2022-08-22T11:00", EventType::WinterStorm),
            Intensity::Light
        );
        assert_eq!(get("2022-08-22T11:00", EventType::Flood), Intensity::None);
        assert_eq!(
            get("2022-08-22T09:00", EventType::WinterStorm),
            Intensity::None
        );
    }

    #[test]
    fn event_report_windows() {
        let cases = [
            ("2022-08-21T15:00", "2022-08-23T20:00", 53),
            ("2022-02-02T16:00", "2022-02-05T16:00", 72),
            ("2022-02-23T05:00", "2022-02-25T10:00", 53),
        ];
        for (a, b, d) in cases {
            let (ha, hb) = (Hour::parse(a).unwrap(), Hour::parse(b).unwrap());
            let at = |h: Hour| h.to_datetime().format("%Y-%m-%dT%H:%M").to_string();
            let reports = vec![
                rep("x", "Flood", a, &at(ha.plus(2)), 1.0),
                rep("y", "Flood", &at(ha.plus(5)), &at(ha.plus(9)), 1.0),
                rep("z", "Flood", &at(hb.plus(-3)), b, 1.0),
            ];
            let w = report_window(&reports).unwrap();
            assert_eq!(w.duration_h, d, "{a} -> {b}");
            assert_eq!(w.count, 3);
        }
    }

    #[test]
    fn report_window_rounding_and_empty() {
        let r = rep("a", "Fog", "2022-02-02T16:20", "2022-02-02T16:20", 3.0);
        let w = report_window(std::slice::from_ref(&r)).unwrap();
        assert_eq!(w.first.to_string(), "2022-02-02T16:00");
        assert_eq!(w.last.to_string(), "2022-02-02T17:00");
        assert_eq!(w.duration_h, 1);
        let on = rep("a", "Fog", "2022-02-02T16:00", "2022-02-02T16:00", 3.0);
        assert_eq!(report_window(&[on]).unwrap().duration_h, 0);
        assert_eq!(report_window(&[]), None);
    }

    fn cs(id: &str, pts: &[(i64, f64)]) -> ChangeSeries {
        ChangeSeries {
            link_id: id.into(),
            samples: pts
                .iter()
                .map(|&(h, f)| ChangeSample { hour: Hour(h), f })
                .collect(),
            coverage: 1.0,
        }
    }

    #[test]
    fn network_mean() {
        let out = network_aggregate(&[
            cs("a", &[(0, -10.0), (1, 0.0)]),
            cs("b", &[(0, -20.0), (3, 0.0)]),
        ]);
        assert_eq!(out.len(), 3);
        assert_eq!((out[0].mean_change, out[0].contributors), (-15.0, 2));
        assert_eq!((out[1].mean_change, out[1].contributors), (0.0, 1));
        assert_eq!(out[2].hour, Hour(3));
        let single = network_aggregate(&[cs("a", &[(5, -7.25)])]);
        assert_eq!(single[0].mean_change, -7.25);
    }

    proptest! {
        #[test]
        fn ups_structure(ws in proptest::collection::vec(0.0f64..10.0, 0..20), len in 0.01f64..5.0) {
            let base = ups_value(ws.iter().copied(), len);
            let doubled = ups_value(ws.iter().map(|w| 2.0 * w), len);
            let longer = ups_value(ws.iter().copied(), 2.0 * len);
            prop_assert!((doubled - 2.0 * base).abs() <= 1e-12 * (1.0 + base));
            prop_assert!((longer - 0.5 * base).abs() <= 1e-12 * (1.0 + base));
            let (l, r) = ws.split_at(ws.len() / 2);
            let split = ups_value(l.iter().copied(), len) + ups_value(r.iter().copied(), len);
            prop_assert!((split - base).abs() <= 1e-9);
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn classify_partitions(starts in proptest::collection::vec((0i64..48, 0usize..3), 0..60)) {
            let t0 = Hour::parse("2022-08-22T00:00").unwrap();
            let subtypes = ["Flood", "Fog", "Heavy snow"];
            let reports: Vec<EventReport> = starts.iter().enumerate().map(|(i, &(h, k))| {
                let t = t0.plus(h).to_datetime();
                EventReport::new(format!("r{i}"), subtypes[k], LatLon { lat: 0.0, lon: 0.0 }, t, t, "x", None, 1.0).unwrap()
            }).collect();
            let span = Span::new(t0, t0.plus(48));
            let types = [EventType::Flood, EventType::Fog, EventType::WinterStorm];
            let labels = classify_hours(&reports, span, &types);
            prop_assert_eq!(labels.len(), 48 * 3);
            prop_assert_eq!(labels.iter().map(|l| l.report_count).sum::<usize>(), reports.len());
            for l in &labels {
                prop_assert_eq!(l.label, Intensity::from_count(l.report_count));
            }
        }

        #[test]
        fn report_window_order_free(hours in proptest::collection::vec((0i64..200, 0i64..30), 1..30), rot in 0usize..30) {
            let t0 = Hour::parse("2022-02-01T00:00").unwrap();
            let reports: Vec<EventReport> = hours.iter().enumerate().map(|(i, &(s, d))| {
                EventReport::new(format!("r{i}"), "Fog", LatLon { lat: 0.0, lon: 0.0 },
                    t0.plus(s).to_datetime(), t0.plus(s + d).to_datetime(), "x", None, 1.0).unwrap()
            }).collect();
            let mut rotated = reports.clone();
            rotated.rotate_left(rot % reports.len());
            rotated.reverse();
            prop_assert_eq!(report_window(&reports), report_window(&rotated));
        }
    }
}
