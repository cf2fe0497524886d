//! Baseline profiles, relative speed change, affected-window detection and
//! the duration / change / AUC metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BaselineCell, BaselineProfile, ResilienceMetrics, SpeedSeries};
use crate::time::{Hour, Span};

/// Hours added on each side of the event span when searching for a window.
pub const SEARCH_PADDING_H: i64 = 48;
/// Hour-of-week cells with fewer observations use the hour-of-day mean.
pub const MIN_CELL_OBS: usize = 3;
/// Links with fewer eligible samples are baseline-insufficient.
pub const MIN_ELIGIBLE: usize = 24;
pub const LOW_COVERAGE: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ResilienceError {
    #[error("speed series for link `{0}` is empty")]
    EmptySeries(String),
    #[error("trapezoid rule needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample times must be strictly increasing")]
    NotIncreasing,
    #[error("invalid window configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventWindowConfig {
    pub event_span: Span,
    /// Percent; a sample is affected when f < threshold.
    pub threshold: f64,
    pub gap_tolerance: i64,
    pub baseline_lookback_days: i64,
}

impl EventWindowConfig {
    pub fn new(event_span: Span) -> Self {
        EventWindowConfig {
            event_span,
            threshold: -1.0,
            gap_tolerance: 2,
            baseline_lookback_days: 30,
        }
    }

    pub fn validate(&self) -> Result<(), ResilienceError> {
        if !(self.threshold < 0.0) {
            return Err(ResilienceError::Config(format!(
                "threshold {} must be negative",
                self.threshold
            )));
        }
        if self.gap_tolerance < 0 {
            return Err(ResilienceError::Config(format!(
                "gap tolerance {} must be >= 0",
                self.gap_tolerance
            )));
        }
        if self.baseline_lookback_days <= 0 {
            return Err(ResilienceError::Config(format!(
                "lookback {} days must be positive",
                self.baseline_lookback_days
            )));
        }
        if self.event_span.end < self.event_span.start {
            return Err(ResilienceError::Config(
                "event span ends before it starts".into(),
            ));
        }
        Ok(())
    }

    pub fn search_span(&self) -> Span {
        Span::new(
            self.event_span.start.plus(-SEARCH_PADDING_H),
            self.event_span.end.plus(SEARCH_PADDING_H),
        )
    }
}

fn mean_cells(n: usize, samples: impl Iterator<Item = (usize, f64)>) -> Vec<BaselineCell> {
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for (k, v) in samples {
        sum[k] += v;
        cnt[k] += 1;
    }
    sum.into_iter()
        .zip(cnt)
        .map(|(s, c)| BaselineCell {
            mean_speed: (c > 0).then(|| s / c as f64),
            n_obs: c,
        })
        .collect()
}

/// Hour-of-week profile from samples in `[event start − lookback, event start)`
/// that fall outside the event span and every span in `exclusions`.
pub fn build_baseline(
    series: &SpeedSeries,
    event_span: Span,
    lookback_days: i64,
    exclusions: &[Span],
) -> Result<BaselineProfile, ResilienceError> {
    if series.samples.is_empty() {
        return Err(ResilienceError::EmptySeries(series.link_id.clone()));
    }
    let lookback = Span::new(event_span.start.plus(-24 * lookback_days), event_span.start);
    let eligible: Vec<(Hour, f64)> = series
        .samples
        .iter()
        .filter(|s| lookback.contains(s.hour))
        .filter(|s| !event_span.contains(s.hour) && !exclusions.iter().any(|e| e.contains(s.hour)))
        .map(|s| (s.hour, s.speed))
        .collect();
    let hour_of_week = mean_cells(168, eligible.iter().map(|(h, v)| (h.hour_of_week(), *v)));
    let hour_of_day = mean_cells(24, eligible.iter().map(|(h, v)| (h.hour_of_day(), *v)));
    Ok(BaselineProfile {
        link_id: series.link_id.clone(),
        hour_of_week,
        hour_of_day,
        n_eligible: eligible.len(),
        insufficient: eligible.len() < MIN_ELIGIBLE,
    })
}

/// Expected speed at `hour`, falling back to hour of day for thin cells.
pub fn baseline_speed(profile: &BaselineProfile, hour: Hour) -> Option<f64> {
    let cell = profile.hour_of_week[hour.hour_of_week()];
    if cell.n_obs >= MIN_CELL_OBS {
        cell.mean_speed
    } else {
        profile.hour_of_day[hour.hour_of_day()].mean_speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeSample {
    pub hour: Hour,
    /// Percent.
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeSeries {
    pub link_id: String,
    pub samples: Vec<ChangeSample>,
    /// Fraction of hours between the first and last observation that carry
    /// both an observed and a baseline speed.
    pub coverage: f64,
}

impl ChangeSeries {
    pub fn coverage_over(&self, span: Span) -> f64 {
        if span.hours() <= 0 {
            return 0.0;
        }
        let n = self
            .samples
            .iter()
            .filter(|s| span.contains(s.hour))
            .count();
        n as f64 / span.hours() as f64
    }

    /// Samples with `from <= hour <= to`.
    pub fn between(&self, from: Hour, to: Hour) -> &[ChangeSample] {
        let lo = self.samples.partition_point(|s| s.hour < from);
        let hi = self.samples.partition_point(|s| s.hour <= to);
        &self.samples[lo..hi.max(lo)]
    }
}

pub fn relative_change(series: &SpeedSeries, baseline: &BaselineProfile) -> ChangeSeries {
    let samples: Vec<ChangeSample> = series
        .samples
        .iter()
        .filter_map(|s| {
            let b = baseline_speed(baseline, s.hour)?;
            Some(ChangeSample {
                hour: s.hour,
                f: 100.0 * (s.speed - b) / b,
            })
        })
        .collect();
    let coverage = match (series.samples.first(), series.samples.last()) {
        (Some(a), Some(b)) => samples.len() as f64 / (b.hour.hours_since(a.hour) + 1) as f64,
        _ => 0.0,
    };
    ChangeSeries {
        link_id: series.link_id.clone(),
        samples,
        coverage,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowDetection {
    pub window: Option<Span>,
    pub coverage: f64,
    pub low_coverage: bool,
}

/// Find the affected window `[a, b)` around the event span.
pub fn detect_window(change: &ChangeSeries, cfg: &EventWindowConfig) -> WindowDetection {
    let search = cfg.search_span();
    let coverage = change.coverage_over(search);
    let below: Vec<Hour> = change
        .samples
        .iter()
        .filter(|s| search.contains(s.hour) && s.f < cfg.threshold)
        .map(|s| s.hour)
        .collect();

    let mut runs: Vec<Span> = Vec::new();
    for h in below {
        match runs.last_mut() {
            Some(r) if h.hours_since(r.end) <= cfg.gap_tolerance => r.end = h.plus(1),
            _ => runs.push(Span::new(h, h.plus(1))),
        }
    }
    let window = runs.into_iter().reduce(|best, r| {
        let key = |s: &Span| (s.overlap(&cfg.event_span), s.hours());
        // Strictly better only; equal keys keep the earlier run.
        if key(&r) > key(&best) {
            r
        } else {
            best
        }
    });
    WindowDetection {
        window,
        coverage,
        low_coverage: coverage < LOW_COVERAGE,
    }
}

/// Composite trapezoid rule over `(t, f)` pairs, hours × percent.
pub fn auc_trapezoid(samples: &[(f64, f64)]) -> Result<f64, ResilienceError> {
    if samples.len() < 2 {
        return Err(ResilienceError::TooFewSamples(samples.len()));
    }
    let mut area = 0.0;
    for w in samples.windows(2) {
        let dt = w[1].0 - w[0].0;
        if !(dt > 0.0) {
            return Err(ResilienceError::NotIncreasing);
        }
        area += 0.5 * dt * (w[0].1 + w[1].1);
    }
    Ok(area)
}

pub fn compute_metrics(
    change: &ChangeSeries,
    detection: &WindowDetection,
    event_id: &str,
) -> ResilienceMetrics {
    let mut m = ResilienceMetrics {
        link_id: change.link_id.clone(),
        event_id: event_id.to_string(),
        window: detection.window,
        duration_hours: 0.0,
        change_pct: 0.0,
        auc_pct_hours: 0.0,
        affected: false,
        low_coverage: detection.low_coverage,
        baseline_insufficient: false,
    };
    let Some(w) = detection.window else {
        return m;
    };
    let inside = change.between(w.start, w.end);
    m.affected = true;
    m.duration_hours = w.hours() as f64;
    m.change_pct = inside.iter().map(|s| s.f).fold(f64::INFINITY, f64::min);
    let pts: Vec<(f64, f64)> = inside
        .iter()
        .map(|s| (s.hour.hours_since(w.start) as f64, s.f))
        .collect();
    // A lone observed sample encloses no area.
    m.auc_pct_hours = auc_trapezoid(&pts).unwrap_or(0.0);
    m
}

/// Baseline, change series, window and metrics for one link and event.
pub fn link_metrics(
    series: &SpeedSeries,
    cfg: &EventWindowConfig,
    exclusions: &[Span],
    event_id: &str,
) -> Result<ResilienceMetrics, ResilienceError> {
    let baseline = build_baseline(
        series,
        cfg.event_span,
        cfg.baseline_lookback_days,
        exclusions,
    )?;
    if baseline.insufficient {
        return Ok(ResilienceMetrics {
            link_id: series.link_id.clone(),
            event_id: event_id.to_string(),
            window: None,
            duration_hours: 0.0,
            change_pct: 0.0,
            auc_pct_hours: 0.0,
            affected: false,
            low_coverage: false,
            baseline_insufficient: true,
        });
    }
    let change = relative_change(series, &baseline);
    let detection = detect_window(&change, cfg);
    Ok(compute_metrics(&change, &detection, event_id))
}

/// One row of `metrics_<event>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub link_id: String,
    pub a: Option<Hour>,
    pub b: Option<Hour>,
    pub duration_h: f64,
    pub change_pct: f64,
    pub auc_pct_h: f64,
    pub affected: bool,
    pub low_coverage: bool,
    pub baseline_insufficient: bool,
}

pub const METRICS_HEADER: &[&str] = &[
    "link_id",
    "a",
    "b",
    "duration_h",
    "change_pct",
    "auc_pct_h",
    "affected",
    "low_coverage",
    "baseline_insufficient",
];

impl From<&ResilienceMetrics> for MetricsRow {
    fn from(m: &ResilienceMetrics) -> Self {
        MetricsRow {
            link_id: m.link_id.clone(),
            a: m.window.map(|w| w.start),
            b: m.window.map(|w| w.end),
            duration_h: m.duration_hours,
            change_pct: m.change_pct,
            auc_pct_h: m.auc_pct_hours,
            affected: m.affected,
            low_coverage: m.low_coverage,
            baseline_insufficient: m.baseline_insufficient,
        }
    }
}

impl MetricsRow {
    pub fn into_metrics(self, event_id: &str) -> ResilienceMetrics {
        ResilienceMetrics {
            link_id: self.link_id,
            event_id: event_id.to_string(),
            window: self.a.zip(self.b).map(|(a, b)| Span::new(a, b)),
            duration_hours: self.duration_h,
            change_pct: self.change_pct,
            auc_pct_hours: self.auc_pct_h,
            affected: self.affected,
            low_coverage: self.low_coverage,
            baseline_insufficient: self.baseline_insufficient,
        }
    }
}
