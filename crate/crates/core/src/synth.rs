//! Seeded synthetic scenarios with known ground truth.
//!
//! Links sit on a regular grid, each with its own TMC code. Normal speeds
//! follow a diurnal pattern that depends on hour of day only. An impacted link
//! gets one contiguous drop inside the event span, with half depth on its
//! first and last hours, and reports placed on the link midpoint.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact;
use crate::model::{EventType, LatLon, Polyline, METERS_PER_MILE};
use crate::time::{format_local, Hour, Span};

pub const GRID_DEG: f64 = 0.02;
const ORIGIN: (f64, f64) = (32.70, -97.30);
const START: &str = "2022-08-01T00:00";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub seed: u64,
    pub n_links: usize,
    pub days: i64,
    /// Half-width of the uniform speed noise, mph.
    pub sigma: f64,
    /// Percent.
    pub depth_min: f64,
    pub depth_max: f64,
    pub duration_min: i64,
    pub duration_max: i64,
    pub impact_fraction: f64,
    /// Mean reports per impacted link.
    pub report_rate: f64,
    pub event_type: EventType,
    pub event_hours: i64,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        SyntheticScenario {
            seed: 1,
            n_links: 500,
            days: 14,
            sigma: 0.0,
            depth_min: 5.0,
            depth_max: 60.0,
            duration_min: 1,
            duration_max: 24,
            impact_fraction: 0.6,
            report_rate: 2.0,
            event_type: EventType::Flood,
            event_hours: 36,
        }
    }
}

impl SyntheticScenario {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Scenario(m.to_string()));
        if self.n_links == 0 {
            return bad("n_links must be positive");
        }
        if self.days < 6 {
            return bad("days must be at least 6");
        }
        if !(self.sigma >= 0.0) {
            return bad("sigma must be >= 0");
        }
        if !(self.depth_min > 0.0 && self.depth_min <= self.depth_max && self.depth_max < 80.0) {
            return bad("depth range must satisfy 0 < min <= max < 80");
        }
        if !(1 <= self.duration_min
            && self.duration_min <= self.duration_max
            && self.duration_max <= 24)
        {
            return bad("duration range must lie in [1, 24]");
        }
        if !(0.0..=1.0).contains(&self.impact_fraction) {
            return bad("impact_fraction must be in [0, 1]");
        }
        if !(self.report_rate >= 0.0) {
            return bad("report_rate must be >= 0");
        }
        if !(1..=48).contains(&self.event_hours) {
            return bad("event_hours must be in [1, 48]");
        }
        Ok(())
    }

    pub fn start(&self) -> Hour {
        Hour::parse(START).expect("valid start")
    }

    /// Declared event span, four days before the end of the data.
    pub fn event_span(&self) -> Span {
        let s = self.start().plus(24 * (self.days - 4));
        Span::new(s, s.plus(self.event_hours))
    }
}

/// Drop multiplier per hour of an impact lasting `d` hours.
pub fn drop_profile(d: i64) -> Vec<f64> {
    (0..d)
        .map(|j| {
            if d >= 2 && (j == 0 || (d >= 3 && j == d - 1)) {
                0.5
            } else {
                1.0
            }
        })
        .collect()
}

/// Expected resilience metrics of one link, with UPS from its reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub link_id: String,
    pub impacted: bool,
    pub onset: Option<Hour>,
    pub duration_h: f64,
    pub depth_pct: f64,
    pub change_pct: f64,
    pub auc_pct_h: f64,
    pub length_mi: f64,
    pub report_count: usize,
    pub ups: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub truth: Vec<TruthRow>,
}

struct Link {
    id: String,
    tmc: String,
    poly: Polyline,
    length: f64,
    fclass: &'static str,
    lanes: &'static str,
    divider: &'static str,
    intersection: bool,
    frontage: bool,
    min_alt: f64,
    slope: f64,
    name: String,
    direction: &'static str,
    free_flow: f64,
    peak_amp: f64,
}

fn peak(h: usize) -> f64 {
    let h = h as f64;
    (-(h - 8.0).powi(2) / 4.0).exp() + (-(h - 17.5).powi(2) / 4.5).exp()
}

fn subtype(t: EventType) -> &'static str {
    match t {
        EventType::Flood => "flood",
        EventType::WinterStorm => "heavy snow",
        EventType::Fog => "fog",
        EventType::Other => "hazard",
    }
}

fn make_link<R: Rng>(i: usize, cols: usize, rng: &mut R) -> Link {
    let (r, c) = (i / cols, i % cols);
    let center = (
        ORIGIN.0 + r as f64 * GRID_DEG,
        ORIGIN.1 + c as f64 * GRID_DEG,
    );
    let bearing: f64 = rng.random_range(0.0..360.0);
    let half_m = rng.random_range(0.1..0.5) * METERS_PER_MILE / 2.0;
    let (s, co) = bearing.to_radians().sin_cos();
    let dlat = half_m * co / 111_320.0;
    let dlon = half_m * s / (111_320.0 * center.0.to_radians().cos());
    let poly = Polyline::new(vec![
        LatLon {
            lat: center.0 - dlat,
            lon: center.1 - dlon,
        },
        LatLon {
            lat: center.0 + dlat,
            lon: center.1 + dlon,
        },
    ])
    .expect("distinct endpoints");
    let length = poly.length_miles();
    let classes = [
        ("freeway", 65.0),
        ("arterial", 45.0),
        ("collector", 35.0),
        ("local_street", 25.0),
    ];
    let (fclass, base) = classes[rng.random_range(0..classes.len())];
    let lanes = ["1", "2-3", "4+"][rng.random_range(0..3)];
    let divider = ["none", "legal", "physical"][rng.random_range(0..3)];
    let direction = ["northbound", "eastbound", "southbound", "westbound"]
        [((bearing + 45.0) / 90.0) as usize % 4];
    Link {
        id: format!("L{i:05}"),
        tmc: format!("T{i:05}"),
        poly,
        length,
        fclass,
        lanes,
        divider,
        intersection: rng.random_bool(0.2),
        frontage: rng.random_bool(0.1),
        min_alt: rng.random_range(0.10..0.30),
        slope: rng.random_range(0.0..4.0),
        name: format!("road {i}"),
        direction,
        free_flow: base + rng.random_range(-5.0..5.0),
        peak_amp: rng.random_range(0.05..0.30),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    fs::write(path, bytes).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write `links.geojson`, `speeds.csv`, `reports.ndjson`, `truth.csv` and
/// `config.toml` into `dir`.
pub fn gen_synthetic(sc: &SyntheticScenario, dir: &Path) -> Result<SyntheticOutput, SynthError> {
    sc.validate()?;
    fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let cols = (sc.n_links as f64).sqrt().ceil() as usize;
    let links: Vec<Link> = (0..sc.n_links)
        .map(|i| make_link(i, cols, &mut rng))
        .collect();
    let span = sc.event_span();
    let start = sc.start();
    let hours = 24 * sc.days;

    let mut speeds = String::with_capacity(sc.n_links * hours as usize * 32);
    speeds.push_str("segment_id,timestamp,speed_mph\n");
    let mut reports = String::new();
    let mut truth = Vec::with_capacity(links.len());
    for l in &links {
        let impacted = rng.random_bool(sc.impact_fraction);
        let (depth, d, onset) = if impacted {
            let depth = rng.random_range(sc.depth_min..=sc.depth_max);
            let d = rng.random_range(sc.duration_min..=sc.duration_max);
            let onset = span.start.plus(rng.random_range(0..span.hours()));
            (depth, d, Some(onset))
        } else {
            (0.0, 0, None)
        };
        let profile = drop_profile(d);
        for k in 0..hours {
            let h = start.plus(k);
            let normal = l.free_flow * (1.0 - l.peak_amp * peak(h.hour_of_day()));
            let g = onset
                .map(|o| h.hours_since(o))
                .filter(|j| (0..d).contains(j))
                .map_or(0.0, |j| profile[j as usize]);
            let noise = if sc.sigma > 0.0 {
                rng.random_range(-sc.sigma..=sc.sigma)
            } else {
                0.0
            };
            let v = normal * (1.0 - depth / 100.0 * g) + noise;
            let _ = writeln!(speeds, "{},{},{}", l.tmc, h, v);
        }
        let mut weights = Vec::new();
        if let Some(o) = onset {
            let n = if sc.report_rate > 0.0 {
                Poisson::new(sc.report_rate)
                    .expect("positive rate")
                    .sample(&mut rng) as usize
            } else {
                0
            };
            let mid = l.poly.midpoint();
            for j in 0..n {
                let begin = o.plus(rng.random_range(0..d)).to_datetime()
                    + chrono::Duration::minutes(rng.random_range(0..60));
                let end = begin + chrono::Duration::minutes(rng.random_range(30..=180));
                let reliability = rng.random_range(1..=10) as f64;
                weights.push(reliability);
                let rec = serde_json::json!({
                    "id": format!("R{}-{j}", l.id),
                    "subtype": subtype(sc.event_type),
                    "lat": mid.lat,
                    "lon": mid.lon,
                    "start": format_local(&begin),
                    "end": format_local(&end),
                    "road_name": l.name,
                    "direction": l.direction,
                    "reliability": reliability,
                });
                let _ = writeln!(reports, "{rec}");
            }
        }
        let v: Vec<f64> = profile.iter().map(|g| -depth * g).collect();
        // Trapezoid through each hour of the drop and back to zero at its end.
        let auc = (0..v.len())
            .map(|j| (v[j] + v.get(j + 1).copied().unwrap_or(0.0)) / 2.0)
            .sum();
        truth.push(TruthRow {
            link_id: l.tmc.clone(),
            impacted,
            onset,
            duration_h: d as f64,
            depth_pct: depth,
            change_pct: -depth,
            auc_pct_h: auc,
            length_mi: l.length,
            report_count: weights.len(),
            ups: weights.iter().sum::<f64>() / (10.0 * l.length),
        });
    }

    let features: Vec<serde_json::Value> = links
        .iter()
        .map(|l| {
            let coords: Vec<[f64; 2]> = l.poly.points().iter().map(|p| [p.lon, p.lat]).collect();
            serde_json::json!({
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": coords},
                "properties": {
                    "id": l.id, "tmc": l.tmc, "fclass": l.fclass, "lanes": l.lanes,
                    "divider": l.divider, "intersection": l.intersection, "frontage": l.frontage,
                    "min_alt_km": l.min_alt, "slope": l.slope, "name": l.name,
                    "direction": l.direction, "length_mi": l.length,
                },
            })
        })
        .collect();
    let geo = serde_json::json!({"type": "FeatureCollection", "features": features});
    write(&dir.join("links.geojson"), geo.to_string().as_bytes())?;
    write(&dir.join("speeds.csv"), speeds.as_bytes())?;
    write(&dir.join("reports.ndjson"), reports.as_bytes())?;
    let trailer = vec![format!("seed={} sigma={}", sc.seed, sc.sigma)];
    let truth_bytes = artifact::to_csv_bytes("truth", &truth, &trailer)
        .map_err(|e| SynthError::Scenario(e.to_string()))?;
    write(&dir.join("truth.csv"), &truth_bytes)?;
    let config = format!(
        "workspace = \"out\"\ntime_zone = \"America/Chicago\"\n\n[inputs]\nlinks = \"links.geojson\"\nlink_format = \"geojson\"\nspeeds = \"speeds.csv\"\nreports = \"reports.ndjson\"\n\n[[events]]\nname = \"synthetic\"\ntype = \"{}\"\nstart = \"{}\"\nend = \"{}\"\n",
        sc.event_type, span.start, span.end
    );
    let config_path = dir.join("config.toml");
    write(&config_path, config.as_bytes())?;
    Ok(SyntheticOutput {
        dir: dir.to_path_buf(),
        config: config_path,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_shapes() {
        assert_eq!(drop_profile(1), vec![1.0]);
        assert_eq!(drop_profile(2), vec![0.5, 1.0]);
        assert_eq!(drop_profile(4), vec![0.5, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn same_seed_same_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sc = SyntheticScenario {
            n_links: 9,
            days: 7,
            ..Default::default()
        };
        gen_synthetic(&sc, a.path()).unwrap();
        gen_synthetic(&sc, b.path()).unwrap();
        for f in [
            "links.geojson",
            "speeds.csv",
            "reports.ndjson",
            "truth.csv",
            "config.toml",
        ] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn rejects_short_horizon() {
        let sc = SyntheticScenario {
            days: 3,
            ..Default::default()
        };
        assert!(sc.validate().is_err());
    }
}
