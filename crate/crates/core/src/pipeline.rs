//! Stage orchestration over a workspace directory.
//!
//! Stages run in a fixed order and each writes its CSV artifacts plus an entry
//! in `manifest.json` holding a fingerprint of its inputs and the hashes of its
//! outputs. A stage whose fingerprint and outputs on disk are unchanged is
//! skipped. Intermediate data is recomputed in memory from the raw inputs, so
//! any stage can be run on its own.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{self, sha256_hex};
use crate::gam::{self, Family, GamData, GamError, GamFit, GamSpec, ThetaMode};
use crate::ingest::{self, to_wkt, IngestError, LinkFormat, ParsedLinks, ParsedSpeeds};
use crate::matching::{match_all, MatchFailure, MatchGates, MatchSummary};
use crate::model::{BaselineProfile, ResilienceMetrics};
use crate::model::{EventReport, EventType, RoadLink, SpeedSeries};
use crate::resilience::{
    baseline_speed, build_baseline, compute_metrics, detect_window, relative_change, ChangeSeries,
    EventWindowConfig, MetricsRow, METRICS_HEADER, MIN_CELL_OBS, SEARCH_PADDING_H,
};
use crate::severity::{
    classify_hours, network_aggregate, report_window, ups_with_length, Intensity, NetworkPoint,
};
use crate::stats::{self, significance_code, welch_ttest};
use crate::time::{Hour, Span};

pub const MANIFEST: &str = "manifest.json";
pub const VIF_LIMIT: f64 = 5.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: parsing input: {msg}")]
    Parse { stage: String, msg: String },
    #[error("stage {stage}: {msg}")]
    Stage { stage: String, msg: String },
    #[error("io: {0}")]
    Io(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Parse { .. } => 3,
            PipelineError::Stage { .. } | PipelineError::Io(_) => 4,
        }
    }
}

fn stage_err(stage: &str, msg: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage: stage.to_string(),
        msg: msg.to_string(),
    }
}

fn default_workspace() -> PathBuf {
    PathBuf::from(".")
}

fn default_link_format() -> String {
    "geojson".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub links: PathBuf,
    #[serde(default = "default_link_format")]
    pub link_format: String,
    pub speeds: PathBuf,
    pub reports: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResilienceParams {
    pub threshold: f64,
    pub gap_tolerance: i64,
    pub lookback_days: i64,
}

impl Default for ResilienceParams {
    fn default() -> Self {
        ResilienceParams {
            threshold: -1.0,
            gap_tolerance: 2,
            lookback_days: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingParams {
    pub distance_m: f64,
    pub bearing_tolerance_deg: f64,
}

impl Default for MatchingParams {
    fn default() -> Self {
        let g = MatchGates::default();
        MatchingParams {
            distance_m: g.distance_m,
            bearing_tolerance_deg: g.bearing_tolerance_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventDef {
    pub name: String,
    #[serde(rename = "type")]
    pub event_type: EventType,
    pub start: String,
    pub end: String,
}

impl EventDef {
    pub fn span(&self) -> Result<Span, PipelineError> {
        let parse = |s: &str| {
            Hour::parse(s).map_err(|e| PipelineError::Config(format!("event `{}`: {e}", self.name)))
        };
        let span = Span::new(parse(&self.start)?, parse(&self.end)?);
        if span.hours() <= 0 {
            return Err(PipelineError::Config(format!(
                "event `{}` ends before it starts",
                self.name
            )));
        }
        Ok(span)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Duration,
    Change,
    Auc,
}

impl Response {
    pub fn as_str(self) -> &'static str {
        match self {
            Response::Duration => "duration",
            Response::Change => "change",
            Response::Auc => "auc",
        }
    }

    fn of(self, m: &ResilienceMetrics) -> f64 {
        match self {
            Response::Duration => m.duration_hours,
            Response::Change => m.change_pct,
            Response::Auc => m.auc_pct_hours,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothDef {
    pub variable: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    10
}

fn default_marginal() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDef {
    pub x: String,
    pub z: String,
    #[serde(default = "default_marginal")]
    pub k1: usize,
    #[serde(default = "default_marginal")]
    pub k2: usize,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDef {
    /// File stem; defaults to the response name.
    #[serde(default)]
    pub name: Option<String>,
    pub response: Response,
    pub family: Family,
    /// Restrict to one event; all events when absent.
    #[serde(default)]
    pub event: Option<String>,
    /// Variable to reference level.
    #[serde(default)]
    pub categorical: BTreeMap<String, String>,
    #[serde(default)]
    pub numeric: Vec<String>,
    #[serde(default)]
    pub smooths: Vec<SmoothDef>,
    #[serde(default)]
    pub tensor: Option<TensorDef>,
    /// VIF screening and forward stepwise AIC over the linear terms.
    #[serde(default = "yes")]
    pub select: bool,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
}

impl ModelDef {
    pub fn stem(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.response.as_str().to_string())
    }
}

pub const CATEGORICAL_VARIABLES: &[&str] = &[
    "functional_class",
    "lane_category",
    "divider",
    "intersection",
    "frontage",
];
pub const NUMERIC_VARIABLES: &[&str] = &[
    "length",
    "min_altitude",
    "slope",
    "ups",
    "normal_speed",
    "lat",
    "lon",
];

/// Road-characteristic models for each response, and separate models of
/// normal speed alone.
pub fn default_models() -> Vec<ModelDef> {
    let refs: BTreeMap<String, String> = [
        ("functional_class", "freeway"),
        ("lane_category", "1"),
        ("divider", "none"),
        ("intersection", "no"),
        ("frontage", "no"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    let mut out = Vec::new();
    for (response, family) in [
        (Response::Duration, Family::NegBinLog),
        (Response::Change, Family::GaussianIdentity),
        (Response::Auc, Family::GaussianIdentity),
    ] {
        out.push(ModelDef {
            name: None,
            response,
            family,
            event: None,
            categorical: refs.clone(),
            numeric: vec!["min_altitude".into(), "slope".into(), "ups".into()],
            smooths: vec![],
            tensor: Some(TensorDef {
                x: "lat".into(),
                z: "lon".into(),
                k1: 5,
                k2: 5,
            }),
            select: true,
            theta: None,
            lambda_grid: None,
        });
        out.push(ModelDef {
            name: Some(format!("{}_speed", response.as_str())),
            response,
            family,
            event: None,
            categorical: BTreeMap::new(),
            numeric: vec![],
            smooths: vec![SmoothDef {
                variable: "normal_speed".into(),
                k: 10,
            }],
            tensor: None,
            select: false,
            theta: None,
            lambda_grid: None,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_workspace")]
    pub workspace: PathBuf,
    pub time_zone: String,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub jobs: usize,
    pub inputs: Inputs,
    #[serde(default)]
    pub resilience: ResilienceParams,
    #[serde(default)]
    pub matching: MatchingParams,
    pub events: Vec<EventDef>,
    /// When absent, [`default_models`] is used.
    #[serde(default)]
    pub models: Option<Vec<ModelDef>>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workspace: Option<PathBuf>,
    pub event: Option<String>,
    pub threshold: Option<f64>,
    pub gap_hours: Option<i64>,
    pub lookback_days: Option<i64>,
    pub jobs: Option<usize>,
}

impl PipelineConfig {
    /// Parse TOML; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), PipelineError> {
        if let Some(w) = &o.workspace {
            // Relative to the working directory, unlike paths in the file.
            self.workspace = if w.is_absolute() {
                w.clone()
            } else {
                std::env::current_dir().unwrap_or_default().join(w)
            };
        }
        if let Some(t) = o.threshold {
            self.resilience.threshold = t;
        }
        if let Some(g) = o.gap_hours {
            self.resilience.gap_tolerance = g;
        }
        if let Some(l) = o.lookback_days {
            self.resilience.lookback_days = l;
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if let Some(name) = &o.event {
            if !self.events.iter().any(|e| &e.name == name) {
                return Err(PipelineError::Config(format!("no event named `{name}`")));
            }
            self.events.retain(|e| &e.name == name);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let r = &self.resilience;
        if !(r.threshold < 0.0) || !r.threshold.is_finite() {
            return bad(format!("threshold must be negative, got {}", r.threshold));
        }
        if r.gap_tolerance < 0 {
            return bad(format!(
                "gap_tolerance must be >= 0, got {}",
                r.gap_tolerance
            ));
        }
        if r.lookback_days <= 0 {
            return bad(format!(
                "lookback_days must be > 0, got {}",
                r.lookback_days
            ));
        }
        if !(self.matching.distance_m > 0.0) {
            return bad("matching distance must be positive".into());
        }
        if !(self.matching.bearing_tolerance_deg > 0.0
            && self.matching.bearing_tolerance_deg <= 180.0)
        {
            return bad("bearing tolerance must be in (0, 180]".into());
        }
        if self.time_zone.trim().is_empty() {
            return bad("time_zone is required".into());
        }
        self.inputs
            .link_format
            .parse::<LinkFormat>()
            .map_err(PipelineError::Config)?;
        if self.events.is_empty() {
            return bad("at least one event is required".into());
        }
        let mut names = BTreeSet::new();
        for e in &self.events {
            if e.name.is_empty()
                || !e
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return bad(format!(
                    "event name `{}` must be alphanumeric, `_` or `-`",
                    e.name
                ));
            }
            if !names.insert(&e.name) {
                return bad(format!("duplicate event `{}`", e.name));
            }
            e.span()?;
        }
        for m in self.models() {
            if let Some(ev) = &m.event {
                if !names.contains(ev) {
                    return bad(format!(
                        "model `{}` refers to unknown event `{ev}`",
                        m.stem()
                    ));
                }
            }
            for v in m.categorical.keys() {
                if !CATEGORICAL_VARIABLES.contains(&v.as_str()) {
                    return bad(format!("unknown categorical variable `{v}`"));
                }
            }
            let nums = m
                .numeric
                .iter()
                .chain(m.smooths.iter().map(|s| &s.variable))
                .chain(m.tensor.iter().flat_map(|t| [&t.x, &t.z]));
            for v in nums {
                if !NUMERIC_VARIABLES.contains(&v.as_str()) {
                    return bad(format!("unknown numeric variable `{v}`"));
                }
            }
            if m.smooths.iter().any(|s| s.k < 3)
                || m.tensor.as_ref().is_some_and(|t| t.k1 < 3 || t.k2 < 3)
            {
                return bad(format!(
                    "model `{}`: basis dimensions must be >= 3",
                    m.stem()
                ));
            }
            if let Some(t) = m.theta {
                if !(t > 0.0) {
                    return bad(format!("model `{}`: theta must be positive", m.stem()));
                }
            }
        }
        Ok(())
    }

    pub fn models(&self) -> Vec<ModelDef> {
        self.models.clone().unwrap_or_else(default_models)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn workspace_dir(&self) -> PathBuf {
        self.resolve(&self.workspace)
    }

    pub fn gates(&self) -> MatchGates {
        MatchGates {
            distance_m: self.matching.distance_m,
            bearing_tolerance_deg: self.matching.bearing_tolerance_deg,
        }
    }

    /// Parameters that determine stage outputs, as canonical JSON.
    fn fingerprint_json(&self) -> String {
        let v = serde_json::json!({
            "time_zone": self.time_zone,
            "link_format": self.inputs.link_format,
            "resilience": self.resilience,
            "matching": self.matching,
            "events": self.events,
            "models": self.models(),
        });
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Conflate,
    Match,
    Baseline,
    Metrics,
    Severity,
    Ttest,
    Gam,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Conflate,
        Stage::Match,
        Stage::Baseline,
        Stage::Metrics,
        Stage::Severity,
        Stage::Ttest,
        Stage::Gam,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Conflate => "conflate",
            Stage::Match => "match",
            Stage::Baseline => "baseline",
            Stage::Metrics => "metrics",
            Stage::Severity => "severity",
            Stage::Ttest => "ttest",
            Stage::Gam => "gam",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Conflate => &[Stage::Ingest],
            Stage::Match => &[Stage::Ingest, Stage::Conflate],
            Stage::Baseline => &[Stage::Conflate],
            Stage::Metrics => &[Stage::Baseline],
            Stage::Severity => &[Stage::Match, Stage::Metrics],
            Stage::Ttest => &[Stage::Metrics, Stage::Severity],
            Stage::Gam => &[Stage::Conflate, Stage::Metrics, Stage::Severity],
            Stage::Report => &[
                Stage::Match,
                Stage::Metrics,
                Stage::Severity,
                Stage::Ttest,
                Stage::Gam,
            ],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Stale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub fingerprint: String,
    pub status: StageStatus,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub schema: String,
    pub parameters: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Option<Manifest> {
        let bytes = fs::read(dir.join(MANIFEST)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| PipelineError::Io(e.to_string()))?;
        text.push('\n');
        fs::write(dir.join(MANIFEST), text)
            .map_err(|e| PipelineError::Io(format!("writing manifest: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub ran: bool,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub workspace: PathBuf,
    pub stages: Vec<StageOutcome>,
}

impl RunReport {
    pub fn ran(&self, stage: Stage) -> bool {
        self.stages.iter().any(|s| s.stage == stage && s.ran)
    }
}

/// Run every stage in order.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    run_stages(cfg, &Stage::ALL)
}

/// Run the given stages in pipeline order, skipping those that are current.
pub fn run_stages(cfg: &PipelineConfig, stages: &[Stage]) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if cfg.jobs > 0 {
        pool = pool.num_threads(cfg.jobs);
    }
    let pool = pool
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| run_inner(cfg, stages))
}

fn run_inner(cfg: &PipelineConfig, stages: &[Stage]) -> Result<RunReport, PipelineError> {
    let dir = cfg.workspace_dir();
    fs::create_dir_all(&dir).map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?;
    let mut ctx = Ctx::new(cfg);
    let mut manifest = Manifest::load(&dir).unwrap_or_default();
    manifest.schema = artifact::schema_line("manifest")
        .trim_start_matches("# schema: ")
        .to_string();
    manifest.parameters = serde_json::from_str(&cfg.fingerprint_json()).unwrap_or_default();
    manifest.inputs = ctx.input_hashes()?;
    let mut wanted: Vec<Stage> = stages.to_vec();
    wanted.sort();
    wanted.dedup();
    let mut outcomes = Vec::new();
    for stage in wanted {
        let fp = fingerprint(cfg, &manifest, stage);
        let current = manifest.stages.get(stage.name()).is_some_and(|e| {
            e.fingerprint == fp
                && e.status == StageStatus::Ok
                && e.outputs
                    .iter()
                    .all(|(f, h)| fs::read(dir.join(f)).is_ok_and(|b| &sha256_hex(&b) == h))
        });
        if current {
            info!("{}: up to date", stage.name());
            let outputs = manifest.stages[stage.name()]
                .outputs
                .keys()
                .cloned()
                .collect();
            outcomes.push(StageOutcome {
                stage,
                ran: false,
                outputs,
            });
            continue;
        }
        info!("{}: running", stage.name());
        let result = ctx.run(stage).and_then(|files| {
            let mut outputs = BTreeMap::new();
            for (name, bytes) in files {
                fs::write(dir.join(&name), &bytes)
                    .map_err(|e| PipelineError::Io(format!("writing {name}: {e}")))?;
                outputs.insert(name, sha256_hex(&bytes));
            }
            Ok(outputs)
        });
        match result {
            Ok(outputs) => {
                outcomes.push(StageOutcome {
                    stage,
                    ran: true,
                    outputs: outputs.keys().cloned().collect(),
                });
                manifest.stages.insert(
                    stage.name().to_string(),
                    StageEntry {
                        fingerprint: fp,
                        status: StageStatus::Ok,
                        outputs,
                    },
                );
                manifest.save(&dir)?;
            }
            Err(e) => {
                for later in Stage::ALL.iter().filter(|s| **s >= stage) {
                    if let Some(entry) = manifest.stages.get_mut(later.name()) {
                        entry.status = StageStatus::Stale;
                    }
                }
                manifest.save(&dir)?;
                return Err(e);
            }
        }
    }
    Ok(RunReport {
        workspace: dir,
        stages: outcomes,
    })
}

fn fingerprint(cfg: &PipelineConfig, manifest: &Manifest, stage: Stage) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "stage={}", stage.name());
    let _ = writeln!(s, "params={}", cfg.fingerprint_json());
    for (k, v) in &manifest.inputs {
        let _ = writeln!(s, "input {k}={v}");
    }
    for d in stage.deps() {
        if let Some(e) = manifest.stages.get(d.name()) {
            for (f, h) in &e.outputs {
                let _ = writeln!(s, "dep {f}={h}");
            }
        }
    }
    sha256_hex(s.as_bytes())
}

struct EventData {
    def: EventDef,
    wcfg: EventWindowConfig,
    baselines: Vec<BaselineProfile>,
    changes: Vec<Option<ChangeSeries>>,
    metrics: Vec<ResilienceMetrics>,
}

/// Lazily computed intermediate data shared by the stages of one run.
struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    links: Option<ParsedLinks>,
    segments: Option<Vec<RoadLink>>,
    speeds: Option<ParsedSpeeds>,
    reports: Option<Vec<EventReport>>,
    matches: Option<MatchSummary>,
    events: BTreeMap<String, EventData>,
}

#[derive(Debug, Clone, Serialize)]
struct LinkRow {
    id: String,
    tmc: Option<String>,
    length_mi: f64,
    bearing: f64,
    fclass: String,
    lanes: String,
    divider: String,
    intersection: bool,
    frontage: bool,
    min_alt_km: f64,
    slope: f64,
    name: String,
    direction: Option<String>,
    geometry: String,
}

impl From<&RoadLink> for LinkRow {
    fn from(l: &RoadLink) -> Self {
        LinkRow {
            id: l.link_id.clone(),
            tmc: l.tmc_code.clone(),
            length_mi: l.length,
            bearing: l.bearing,
            fclass: l.functional_class.to_string(),
            lanes: l.lane_category.to_string(),
            divider: l.divider.to_string(),
            intersection: l.is_intersection,
            frontage: l.is_frontage,
            min_alt_km: l.min_altitude,
            slope: l.slope,
            name: l.road_name.clone(),
            direction: l.direction_tag.clone(),
            geometry: to_wkt(&l.geometry),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct IngestRow {
    input: String,
    sha256: String,
    records: usize,
    excluded: usize,
    duplicates: usize,
    dropped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatchRow {
    pub report_id: String,
    pub link_id: Option<String>,
    pub segment_id: Option<String>,
    pub distance_m: Option<f64>,
    pub failure_reason: Option<MatchFailure>,
}

#[derive(Debug, Clone, Serialize)]
struct BaselineRow {
    link_id: String,
    hour_of_week: usize,
    mean_speed: Option<f64>,
    n_obs: usize,
    expected_speed: Option<f64>,
    fallback: bool,
    n_eligible: usize,
    insufficient: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UpsRow {
    pub link_id: String,
    pub event_type: EventType,
    pub ups: f64,
    pub report_count: usize,
}

#[derive(Debug, Clone, Serialize)]
struct IntensityRow {
    hour: Hour,
    event_type: EventType,
    report_count: usize,
    label: &'static str,
}

#[derive(Debug, Clone, Serialize)]
struct WindowRow {
    event: String,
    source: &'static str,
    first: Option<Hour>,
    last: Option<Hour>,
    count: usize,
    duration_h: i64,
}

#[derive(Debug, Clone, Serialize)]
struct TtestRow {
    event: String,
    event_type: EventType,
    level: String,
    n_event: usize,
    mean_event: f64,
    sd_event: f64,
    n_normal: usize,
    mean_normal: f64,
    sd_normal: f64,
    diff: f64,
    ci_lo: f64,
    ci_hi: f64,
    t: f64,
    df: f64,
    p_value: f64,
    signif: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionRow {
    pub step: usize,
    term: String,
    action: String,
    value: Option<f64>,
}

fn intensity_str(i: Intensity) -> &'static str {
    match i {
        Intensity::None => "none",
        Intensity::Light => "light",
        Intensity::Heavy => "heavy",
    }
}

fn csv_bytes<T: Serialize>(
    stage: &str,
    name: &str,
    rows: &[T],
    trailer: &[String],
) -> Result<Vec<u8>, PipelineError> {
    artifact::to_csv_bytes(name, rows, trailer).map_err(|e| stage_err(stage, e))
}

fn csv_bytes_h<T: Serialize>(
    stage: &str,
    name: &str,
    header: &[&str],
    rows: &[T],
    trailer: &[String],
) -> Result<Vec<u8>, PipelineError> {
    artifact::to_csv_bytes_with_header(name, header, rows, trailer).map_err(|e| stage_err(stage, e))
}

type Files = Vec<(String, Vec<u8>)>;

impl<'a> Ctx<'a> {
    fn new(cfg: &'a PipelineConfig) -> Self {
        Ctx {
            cfg,
            links: None,
            segments: None,
            speeds: None,
            reports: None,
            matches: None,
            events: BTreeMap::new(),
        }
    }

    fn input_paths(&self) -> [(&'static str, PathBuf); 3] {
        let i = &self.cfg.inputs;
        [
            ("links", self.cfg.resolve(&i.links)),
            ("reports", self.cfg.resolve(&i.reports)),
            ("speeds", self.cfg.resolve(&i.speeds)),
        ]
    }

    fn input_hashes(&self) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut out = BTreeMap::new();
        for (k, p) in self.input_paths() {
            let bytes = fs::read(&p).map_err(|e| PipelineError::Parse {
                stage: "ingest".into(),
                msg: format!("{}: {e}", p.display()),
            })?;
            out.insert(k.to_string(), sha256_hex(&bytes));
        }
        Ok(out)
    }

    fn parse_err(e: IngestError, what: &str) -> PipelineError {
        PipelineError::Parse {
            stage: "ingest".into(),
            msg: format!("{what}: {e}"),
        }
    }

    fn ensure_links(&mut self) -> Result<(), PipelineError> {
        if self.links.is_none() {
            let fmt: LinkFormat = self
                .cfg
                .inputs
                .link_format
                .parse()
                .map_err(PipelineError::Config)?;
            let parsed = ingest::parse_links(&self.cfg.resolve(&self.cfg.inputs.links), fmt)
                .map_err(|e| Self::parse_err(e, "links"))?;
            let mut ids = BTreeSet::new();
            for l in &parsed.links {
                if !ids.insert(l.link_id.clone()) {
                    return Err(PipelineError::Parse {
                        stage: "ingest".into(),
                        msg: format!("links: duplicate link id `{}`", l.link_id),
                    });
                }
            }
            self.links = Some(parsed);
        }
        Ok(())
    }

    fn ensure_speeds(&mut self) -> Result<(), PipelineError> {
        if self.speeds.is_none() {
            let s = ingest::parse_speeds(&self.cfg.resolve(&self.cfg.inputs.speeds))
                .map_err(|e| Self::parse_err(e, "speeds"))?;
            self.speeds = Some(s);
        }
        Ok(())
    }

    fn ensure_reports(&mut self) -> Result<(), PipelineError> {
        if self.reports.is_none() {
            let r = ingest::parse_reports(&self.cfg.resolve(&self.cfg.inputs.reports))
                .map_err(|e| Self::parse_err(e, "reports"))?;
            self.reports = Some(r);
        }
        Ok(())
    }

    fn ensure_segments(&mut self) -> Result<(), PipelineError> {
        self.ensure_links()?;
        if self.segments.is_none() {
            let links = &self.links.as_ref().expect("links loaded").links;
            let with_tmc: Vec<RoadLink> = links
                .iter()
                .filter(|l| l.tmc_code.is_some())
                .cloned()
                .collect();
            let skipped = links.len() - with_tmc.len();
            if skipped > 0 {
                warn!("conflate: {skipped} links without a TMC code skipped");
            }
            let segs = ingest::conflate_by_tmc(&with_tmc).map_err(|e| stage_err("conflate", e))?;
            self.segments = Some(segs);
        }
        Ok(())
    }

    fn ensure_matches(&mut self) -> Result<(), PipelineError> {
        self.ensure_links()?;
        self.ensure_reports()?;
        if self.matches.is_none() {
            let links = &self.links.as_ref().expect("links loaded").links;
            let reports = self.reports.as_ref().expect("reports loaded");
            let m =
                match_all(reports, links, &self.cfg.gates()).map_err(|e| stage_err("match", e))?;
            self.matches = Some(m);
        }
        Ok(())
    }

    fn segment_of(&self) -> BTreeMap<&str, &str> {
        self.links
            .as_ref()
            .map(|p| {
                p.links
                    .iter()
                    .filter_map(|l| l.tmc_code.as_deref().map(|t| (l.link_id.as_str(), t)))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn exclusions_for(&self, name: &str) -> Result<Vec<Span>, PipelineError> {
        self.cfg
            .events
            .iter()
            .filter(|e| e.name != name)
            .map(EventDef::span)
            .collect()
    }

    fn ensure_event(&mut self, name: &str) -> Result<(), PipelineError> {
        if self.events.contains_key(name) {
            return Ok(());
        }
        self.ensure_speeds()?;
        let def = self
            .cfg
            .events
            .iter()
            .find(|e| e.name == name)
            .cloned()
            .ok_or_else(|| PipelineError::Config(format!("no event `{name}`")))?;
        let span = def.span()?;
        let r = &self.cfg.resilience;
        let wcfg = EventWindowConfig {
            event_span: span,
            threshold: r.threshold,
            gap_tolerance: r.gap_tolerance,
            baseline_lookback_days: r.lookback_days,
        };
        wcfg.validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let exclusions = self.exclusions_for(name)?;
        let series: &[SpeedSeries] = &self.speeds.as_ref().expect("speeds loaded").series;
        let per_link: Vec<(BaselineProfile, Option<ChangeSeries>, ResilienceMetrics)> = series
            .par_iter()
            .map(|s| {
                let b = build_baseline(s, span, r.lookback_days, &exclusions)
                    .map_err(|e| stage_err("baseline", format!("link {}: {e}", s.link_id)))?;
                if b.insufficient {
                    let m = ResilienceMetrics {
                        link_id: s.link_id.clone(),
                        event_id: name.to_string(),
                        window: None,
                        duration_hours: 0.0,
                        change_pct: 0.0,
                        auc_pct_hours: 0.0,
                        affected: false,
                        low_coverage: false,
                        baseline_insufficient: true,
                    };
                    return Ok((b, None, m));
                }
                let c = relative_change(s, &b);
                let d = detect_window(&c, &wcfg);
                let m = compute_metrics(&c, &d, name);
                Ok((b, Some(c), m))
            })
            .collect::<Result<_, PipelineError>>()?;
        let mut baselines = Vec::with_capacity(per_link.len());
        let mut changes = Vec::with_capacity(per_link.len());
        let mut metrics = Vec::with_capacity(per_link.len());
        for (b, c, m) in per_link {
            baselines.push(b);
            changes.push(c);
            metrics.push(m);
        }
        let insufficient = metrics.iter().filter(|m| m.baseline_insufficient).count();
        if insufficient > 0 {
            warn!(
                "event {name}: {insufficient} links have an insufficient baseline and are flagged"
            );
        }
        self.events.insert(
            name.to_string(),
            EventData {
                def,
                wcfg,
                baselines,
                changes,
                metrics,
            },
        );
        Ok(())
    }

    fn event_names(&self) -> Vec<String> {
        self.cfg.events.iter().map(|e| e.name.clone()).collect()
    }

    /// Reports of the event's type overlapping its padded search span.
    fn event_reports(&self, ev: &EventData) -> Vec<EventReport> {
        let search = ev.wcfg.search_span();
        self.reports
            .as_ref()
            .expect("reports loaded")
            .iter()
            .filter(|r| r.event_type == ev.def.event_type)
            .filter(|r| {
                Hour::floor(&r.start_time) < search.end && Hour::ceil(&r.end_time) >= search.start
            })
            .cloned()
            .collect()
    }

    fn run(&mut self, stage: Stage) -> Result<Files, PipelineError> {
        match stage {
            Stage::Ingest => self.stage_ingest(),
            Stage::Conflate => self.stage_conflate(),
            Stage::Match => self.stage_match(),
            Stage::Baseline => self.stage_baseline(),
            Stage::Metrics => self.stage_metrics(),
            Stage::Severity => self.stage_severity(),
            Stage::Ttest => self.stage_ttest(),
            Stage::Gam => self.stage_gam(),
            Stage::Report => self.stage_report(),
        }
    }

    fn stage_ingest(&mut self) -> Result<Files, PipelineError> {
        self.ensure_links()?;
        self.ensure_speeds()?;
        self.ensure_reports()?;
        let hashes = self.input_hashes()?;
        let links = self.links.as_ref().expect("loaded");
        let speeds = self.speeds.as_ref().expect("loaded");
        let reports = self.reports.as_ref().expect("loaded");
        let rows: Vec<LinkRow> = links.links.iter().map(LinkRow::from).collect();
        let summary = vec![
            IngestRow {
                input: "links".into(),
                sha256: hashes["links"].clone(),
                records: links.links.len(),
                excluded: links.excluded,
                duplicates: 0,
                dropped: 0,
            },
            IngestRow {
                input: "reports".into(),
                sha256: hashes["reports"].clone(),
                records: reports.len(),
                excluded: 0,
                duplicates: 0,
                dropped: 0,
            },
            IngestRow {
                input: "speeds".into(),
                sha256: hashes["speeds"].clone(),
                records: speeds.series.iter().map(|s| s.samples.len()).sum(),
                excluded: 0,
                duplicates: speeds.duplicates,
                dropped: speeds.dropped_nonpositive,
            },
        ];
        let trailer = vec![
            format!("time_zone={}", self.cfg.time_zone),
            format!("speed_series={}", speeds.series.len()),
        ];
        Ok(vec![
            (
                "links.csv".into(),
                csv_bytes("ingest", "links", &rows, &[])?,
            ),
            (
                "ingest_summary.csv".into(),
                csv_bytes("ingest", "ingest_summary", &summary, &trailer)?,
            ),
        ])
    }

    fn stage_conflate(&mut self) -> Result<Files, PipelineError> {
        self.ensure_segments()?;
        let segs = self.segments.as_ref().expect("loaded");
        let rows: Vec<LinkRow> = segs.iter().map(LinkRow::from).collect();
        let trailer = vec![format!("segments={}", rows.len())];
        Ok(vec![(
            "segments.csv".into(),
            csv_bytes("conflate", "segments", &rows, &trailer)?,
        )])
    }

    fn stage_match(&mut self) -> Result<Files, PipelineError> {
        self.ensure_matches()?;
        let seg_of = self.segment_of();
        let m = self.matches.as_ref().expect("loaded");
        let rows: Vec<MatchRow> = m
            .results
            .iter()
            .map(|r| MatchRow {
                report_id: r.report_id.clone(),
                link_id: r.link_id.clone(),
                segment_id: r
                    .link_id
                    .as_deref()
                    .and_then(|l| seg_of.get(l))
                    .map(|s| s.to_string()),
                distance_m: r.distance_m,
                failure_reason: r.failure_reason,
            })
            .collect();
        let rate = m
            .match_rate
            .map(|r| r.to_string())
            .unwrap_or_else(|| "null".into());
        let mut trailer = vec![
            format!("match_rate={rate}"),
            format!("matched={}", m.matched()),
        ];
        for f in [
            MatchFailure::TooFar,
            MatchFailure::DirectionMismatch,
            MatchFailure::NameMismatch,
            MatchFailure::NoCandidate,
        ] {
            let name = serde_json::to_value(f)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            trailer.push(format!("{name}={}", m.failures(f)));
        }
        let header = &[
            "report_id",
            "link_id",
            "segment_id",
            "distance_m",
            "failure_reason",
        ];
        Ok(vec![(
            "matches.csv".into(),
            csv_bytes_h("match", "matches", header, &rows, &trailer)?,
        )])
    }

    fn stage_baseline(&mut self) -> Result<Files, PipelineError> {
        let mut files = Vec::new();
        for name in self.event_names() {
            self.ensure_event(&name)?;
            let ev = &self.events[&name];
            let mut rows = Vec::with_capacity(ev.baselines.len() * 168);
            for b in &ev.baselines {
                for (how, cell) in b.hour_of_week.iter().enumerate() {
                    // Any hour with this hour-of-week gives the served value.
                    let probe = Hour(how as i64 - 72);
                    rows.push(BaselineRow {
                        link_id: b.link_id.clone(),
                        hour_of_week: how,
                        mean_speed: cell.mean_speed,
                        n_obs: cell.n_obs,
                        expected_speed: baseline_speed(b, probe),
                        fallback: cell.n_obs < MIN_CELL_OBS,
                        n_eligible: b.n_eligible,
                        insufficient: b.insufficient,
                    });
                }
            }
            let trailer = vec![
                format!("lookback_days={}", ev.wcfg.baseline_lookback_days),
                format!(
                    "event_span={}..{}",
                    ev.wcfg.event_span.start, ev.wcfg.event_span.end
                ),
                "hour_of_week=0 is Monday 00:00".to_string(),
            ];
            files.push((
                format!("baseline_{name}.csv"),
                csv_bytes("baseline", "baseline", &rows, &trailer)?,
            ));
        }
        Ok(files)
    }

    fn stage_metrics(&mut self) -> Result<Files, PipelineError> {
        let mut files = Vec::new();
        for name in self.event_names() {
            self.ensure_event(&name)?;
            let ev = &self.events[&name];
            let rows: Vec<MetricsRow> = ev.metrics.iter().map(MetricsRow::from).collect();
            let affected = rows.iter().filter(|r| r.affected).count();
            let trailer = vec![
                format!("threshold={}", ev.wcfg.threshold),
                format!("gap_tolerance={}", ev.wcfg.gap_tolerance),
                format!("search_padding_h={SEARCH_PADDING_H}"),
                format!("links={} affected={affected}", rows.len()),
            ];
            files.push((
                format!("metrics_{name}.csv"),
                csv_bytes_h("metrics", "metrics", METRICS_HEADER, &rows, &trailer)?,
            ));
        }
        Ok(files)
    }

    /// UPS per segment for one event from matched reports.
    fn ups_rows(&self, ev: &EventData) -> Vec<UpsRow> {
        let segs = self.segments.as_ref().expect("segments loaded");
        let seg_of = self.segment_of();
        let matched: BTreeMap<&str, &str> = self
            .matches
            .as_ref()
            .expect("matches loaded")
            .results
            .iter()
            .filter_map(|r| r.link_id.as_deref().map(|l| (r.report_id.as_str(), l)))
            .collect();
        let reports = self.event_reports(ev);
        let mut by_seg: BTreeMap<&str, Vec<&EventReport>> = BTreeMap::new();
        for r in &reports {
            if let Some(seg) = matched
                .get(r.report_id.as_str())
                .and_then(|l| seg_of.get(l))
            {
                by_seg.entry(seg).or_default().push(r);
            }
        }
        segs.iter()
            .map(|s| {
                let rs = by_seg.get(s.link_id.as_str()).cloned().unwrap_or_default();
                let u = ups_with_length(&s.link_id, s.length, ev.def.event_type, &rs);
                UpsRow {
                    link_id: u.link_id,
                    event_type: u.event_type,
                    ups: u.ups,
                    report_count: u.report_count,
                }
            })
            .collect()
    }

    fn network(ev: &EventData) -> Vec<NetworkPoint> {
        let series: Vec<ChangeSeries> = ev.changes.iter().flatten().cloned().collect();
        network_aggregate(&series)
    }

    fn stage_severity(&mut self) -> Result<Files, PipelineError> {
        self.ensure_segments()?;
        self.ensure_matches()?;
        let mut files = Vec::new();
        let mut windows = Vec::new();
        for name in self.event_names() {
            self.ensure_event(&name)?;
            let ev = &self.events[&name];
            let ups = self.ups_rows(ev);
            let total: usize = ups.iter().map(|u| u.report_count).sum();
            files.push((
                format!("ups_{name}.csv"),
                csv_bytes_h(
                    "severity",
                    "ups",
                    &["link_id", "event_type", "ups", "report_count"],
                    &ups,
                    &[format!("matched_reports={total}")],
                )?,
            ));
            let reports = self.event_reports(ev);
            let search = ev.wcfg.search_span();
            let labels: Vec<IntensityRow> = classify_hours(&reports, search, &[ev.def.event_type])
                .into_iter()
                .map(|l| IntensityRow {
                    hour: l.hour,
                    event_type: l.event_type,
                    report_count: l.report_count,
                    label: intensity_str(l.label),
                })
                .collect();
            files.push((
                format!("intensity_{name}.csv"),
                csv_bytes("severity", "intensity", &labels, &[])?,
            ));
            let net = Self::network(ev);
            files.push((
                format!("network_series_{name}.csv"),
                csv_bytes_h(
                    "severity",
                    "network_series",
                    &["hour", "mean_change", "contributors"],
                    &net,
                    &[],
                )?,
            ));
            let rw = report_window(&reports);
            windows.push(WindowRow {
                event: name.clone(),
                source: "reports",
                first: rw.as_ref().map(|w| w.first),
                last: rw.as_ref().map(|w| w.last),
                count: rw.as_ref().map_or(0, |w| w.count),
                duration_h: rw.as_ref().map_or(0, |w| w.duration_h),
            });
            let affected: Vec<Span> = ev.metrics.iter().filter_map(|m| m.window).collect();
            let first = affected.iter().map(|w| w.start).min();
            let last = affected.iter().map(|w| w.end).max();
            windows.push(WindowRow {
                event: name.clone(),
                source: "speeds",
                first,
                last,
                count: affected.len(),
                duration_h: first.zip(last).map_or(0, |(a, b)| b.hours_since(a)),
            });
        }
        files.push((
            "window_summary.csv".into(),
            csv_bytes_h(
                "severity",
                "window_summary",
                &["event", "source", "first", "last", "count", "duration_h"],
                &windows,
                &[],
            )?,
        ));
        Ok(files)
    }

    fn stage_ttest(&mut self) -> Result<Files, PipelineError> {
        self.ensure_reports()?;
        let mut files = Vec::new();
        let all_spans: Vec<Span> = self
            .cfg
            .events
            .iter()
            .map(EventDef::span)
            .collect::<Result<_, _>>()?;
        for name in self.event_names() {
            self.ensure_event(&name)?;
            let ev = &self.events[&name];
            let net = Self::network(ev);
            let by_hour: BTreeMap<Hour, f64> =
                net.iter().map(|p| (p.hour, p.mean_change)).collect();
            let start = ev.wcfg.event_span.start;
            let lookback = Span::new(start.plus(-24 * ev.wcfg.baseline_lookback_days), start);
            let normal: Vec<f64> = net
                .iter()
                .filter(|p| {
                    lookback.contains(p.hour) && !all_spans.iter().any(|s| s.contains(p.hour))
                })
                .map(|p| p.mean_change)
                .collect();
            let reports = self.event_reports(ev);
            let labels = classify_hours(&reports, ev.wcfg.search_span(), &[ev.def.event_type]);
            let mut rows = Vec::new();
            let mut notes = Vec::new();
            for level in [Intensity::Light, Intensity::Heavy] {
                let sample: Vec<f64> = labels
                    .iter()
                    .filter(|l| l.label == level)
                    .filter_map(|l| by_hour.get(&l.hour).copied())
                    .collect();
                let lvl = intensity_str(level);
                match welch_ttest(lvl, &sample, "normal", &normal) {
                    Ok(t) => rows.push(TtestRow {
                        event: name.clone(),
                        event_type: ev.def.event_type,
                        level: lvl.to_string(),
                        n_event: t.n_a,
                        mean_event: t.mean_a,
                        sd_event: t.sd_a,
                        n_normal: t.n_b,
                        mean_normal: t.mean_b,
                        sd_normal: t.sd_b,
                        diff: t.diff,
                        ci_lo: t.ci_lo,
                        ci_hi: t.ci_hi,
                        t: t.t_stat,
                        df: t.df,
                        p_value: t.p_value,
                        signif: t.significance,
                    }),
                    Err(e) => {
                        warn!("ttest {name} {lvl}: skipped ({e})");
                        notes.push(format!("skipped level={lvl} n={} reason={e}", sample.len()));
                    }
                }
            }
            let header = &[
                "event",
                "event_type",
                "level",
                "n_event",
                "mean_event",
                "sd_event",
                "n_normal",
                "mean_normal",
                "sd_normal",
                "diff",
                "ci_lo",
                "ci_hi",
                "t",
                "df",
                "p_value",
                "signif",
            ];
            files.push((
                format!("ttest_{name}.csv"),
                csv_bytes_h("ttest", "ttest", header, &rows, &notes)?,
            ));
        }
        Ok(files)
    }

    fn model_rows(&self, ev: &EventData) -> Vec<ModelRow> {
        let segs = self.segments.as_ref().expect("segments loaded");
        let seg_by_id: BTreeMap<&str, &RoadLink> =
            segs.iter().map(|s| (s.link_id.as_str(), s)).collect();
        let ups: BTreeMap<String, f64> = self
            .ups_rows(ev)
            .into_iter()
            .map(|u| (u.link_id, u.ups))
            .collect();
        let mut rows = Vec::new();
        for (m, b) in ev.metrics.iter().zip(&ev.baselines) {
            if m.baseline_insufficient {
                continue;
            }
            let Some(seg) = seg_by_id.get(m.link_id.as_str()) else {
                continue;
            };
            let (sum, n) = b
                .hour_of_day
                .iter()
                .filter_map(|c| c.mean_speed.map(|v| (v * c.n_obs as f64, c.n_obs)))
                .fold((0.0, 0), |(s, k), (v, c)| (s + v, k + c));
            let mid = seg.geometry.midpoint();
            let yes_no = |b: bool| if b { "yes" } else { "no" }.to_string();
            let mut cats = BTreeMap::new();
            cats.insert("functional_class", seg.functional_class.to_string());
            cats.insert("lane_category", seg.lane_category.to_string());
            cats.insert("divider", seg.divider.to_string());
            cats.insert("intersection", yes_no(seg.is_intersection));
            cats.insert("frontage", yes_no(seg.is_frontage));
            let mut nums = BTreeMap::new();
            nums.insert("length", Some(seg.length));
            nums.insert("min_altitude", Some(seg.min_altitude));
            nums.insert("slope", Some(seg.slope));
            nums.insert("ups", ups.get(&m.link_id).copied());
            nums.insert("normal_speed", (n > 0).then(|| sum / n as f64));
            nums.insert("lat", Some(mid.lat));
            nums.insert("lon", Some(mid.lon));
            rows.push(ModelRow {
                metrics: m.clone(),
                cats,
                nums,
            });
        }
        rows
    }

    fn stage_gam(&mut self) -> Result<Files, PipelineError> {
        self.ensure_segments()?;
        self.ensure_matches()?;
        let mut files = Vec::new();
        let models = self.cfg.models();
        for name in self.event_names() {
            self.ensure_event(&name)?;
            let ev = &self.events[&name];
            let rows = self.model_rows(ev);
            let defs: Vec<&ModelDef> = models
                .iter()
                .filter(|m| m.event.as_ref().is_none_or(|e| e == &name))
                .collect();
            let outcomes: Vec<ModelOutcome> = defs
                .par_iter()
                .map(|d| {
                    fit_model(d, &rows).map_err(|e| {
                        stage_err("gam", format!("event {name} model {}: {e}", d.stem()))
                    })
                })
                .collect::<Result<_, _>>()?;
            for (d, o) in defs.iter().zip(outcomes) {
                let stem = format!("gam_{}_{name}", d.stem());
                let mut trailer = o.notes.clone();
                let (summary, curves) = match &o.fit {
                    Some(fit) => {
                        trailer.extend(fit_trailer(fit));
                        (gam::summarize_fit(fit), fit.smooth_curves())
                    }
                    None => (vec![], vec![]),
                };
                files.push((
                    format!("{stem}.csv"),
                    csv_bytes_h(
                        "gam",
                        "gam_summary",
                        gam::SUMMARY_HEADER,
                        &summary,
                        &trailer,
                    )?,
                ));
                files.push((
                    format!("{stem}_smooth.csv"),
                    csv_bytes_h(
                        "gam",
                        "gam_smooth",
                        &["term", "x", "z", "fit", "se", "lo", "hi"],
                        &curves,
                        &[],
                    )?,
                ));
                files.push((
                    format!("selection_{}_{name}.csv", d.stem()),
                    csv_bytes_h(
                        "gam",
                        "selection",
                        &["step", "term", "action", "value"],
                        &o.selection,
                        &[],
                    )?,
                ));
            }
        }
        Ok(files)
    }

    fn stage_report(&mut self) -> Result<Files, PipelineError> {
        self.ensure_matches()?;
        self.ensure_segments()?;
        let mut out = String::new();
        let m = self.matches.as_ref().expect("loaded");
        let _ = writeln!(out, "Road link resilience report");
        let _ = writeln!(out, "time zone: {}", self.cfg.time_zone);
        let _ = writeln!(out);
        let _ = writeln!(out, "Report matching");
        let _ = writeln!(
            out,
            "  reports {}  matched {}  rate {}",
            m.results.len(),
            m.matched(),
            m.match_rate
                .map_or("undefined".to_string(), |r| format!("{:.2}%", 100.0 * r))
        );
        let models = self.cfg.models();
        for name in self.event_names() {
            self.ensure_event(&name)?;
            let ev = &self.events[&name];
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "Event {name} ({}), span {} .. {}",
                ev.def.event_type, ev.wcfg.event_span.start, ev.wcfg.event_span.end
            );
            let reports = self.event_reports(ev);
            match report_window(&reports) {
                Some(w) => {
                    let _ = writeln!(
                        out,
                        "  reports: {} from {} to {}, {} h",
                        w.count, w.first, w.last, w.duration_h
                    );
                }
                None => {
                    let _ = writeln!(out, "  reports: none");
                }
            }
            let usable: Vec<&ResilienceMetrics> = ev
                .metrics
                .iter()
                .filter(|m| !m.baseline_insufficient)
                .collect();
            let _ = writeln!(
                out,
                "  links: {} usable, {} affected, {} low coverage, {} insufficient baseline",
                usable.len(),
                usable.iter().filter(|m| m.affected).count(),
                usable.iter().filter(|m| m.low_coverage).count(),
                ev.metrics.len() - usable.len()
            );
            for r in [Response::Duration, Response::Change, Response::Auc] {
                let v: Vec<f64> = usable.iter().map(|m| r.of(m)).collect();
                if v.len() >= 2 {
                    let _ = writeln!(
                        out,
                        "  {:<9} mean {:>10.3}  sd {:>10.3}",
                        r.as_str(),
                        stats::mean(&v),
                        stats::variance(&v).sqrt()
                    );
                }
            }
            let defs: Vec<&ModelDef> = models
                .iter()
                .filter(|d| d.event.as_ref().is_none_or(|e| e == &name))
                .collect();
            let rows = self.model_rows(ev);
            for d in defs {
                let o = fit_model(d, &rows).map_err(|e| stage_err("report", e))?;
                let _ = writeln!(out);
                let _ = writeln!(out, "  Model {} ({:?})", d.stem(), d.family);
                let Some(fit) = o.fit else {
                    for n in &o.notes {
                        let _ = writeln!(out, "    {n}");
                    }
                    continue;
                };
                for c in &fit.parametric {
                    let _ = writeln!(
                        out,
                        "    {:<28} {:>10.4} [{:>9.4}, {:>9.4}] {}",
                        c.name,
                        c.estimate,
                        c.ci_lo,
                        c.ci_hi,
                        significance_code(c.p_value)
                    );
                }
                for s in &fit.smooths {
                    let _ = writeln!(
                        out,
                        "    {:<28} edf {:>7.3} {}",
                        s.name,
                        s.edf,
                        significance_code(s.p_value)
                    );
                }
                let _ = writeln!(
                    out,
                    "    R-sq.(adj) {:.3}  deviance explained {:.1}%  n {}",
                    fit.r2_adjusted,
                    100.0 * fit.deviance_explained,
                    fit.n
                );
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "Confidence intervals are model-based (penalized-fit covariance), not robust."
        );
        let _ = writeln!(
            out,
            "Signif. codes: 0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1"
        );
        Ok(vec![("report.txt".into(), out.into_bytes())])
    }
}

#[derive(Debug, Clone)]
pub struct ModelRow {
    pub metrics: ResilienceMetrics,
    pub cats: BTreeMap<&'static str, String>,
    pub nums: BTreeMap<&'static str, Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct ModelOutcome {
    pub fit: Option<GamFit>,
    pub selection: Vec<SelectionRow>,
    pub notes: Vec<String>,
}

fn fit_trailer(fit: &GamFit) -> Vec<String> {
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(";")
    };
    let mut t = vec![
        format!("family={:?}", fit.family),
        format!("n={}", fit.n),
        format!("lambdas={}", fmt(&fit.lambdas)),
        format!("lambda_grid={}", fmt(&fit.lambda_grid)),
        format!(
            "converged={} iterations={} last_change={}",
            fit.convergence.converged, fit.convergence.iterations, fit.convergence.last_change
        ),
        "ci=model-based from the penalized covariance; not a robust interval".to_string(),
    ];
    if let Some(th) = fit.theta {
        t.push(format!("theta={th} estimated={}", fit.theta_estimated));
    }
    t
}

fn distinct(v: &[f64]) -> usize {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s.len()
}

/// Prune infeasible terms, screen numeric terms by VIF, select linear terms
/// by forward stepwise AIC and fit the final model.
pub fn fit_model(def: &ModelDef, rows: &[ModelRow]) -> Result<ModelOutcome, GamError> {
    let mut selection = Vec::new();
    let mut notes = Vec::new();
    let mut step = 0;
    let mut log = |term: &str, action: &str, value: Option<f64>, sel: &mut Vec<SelectionRow>| {
        step += 1;
        sel.push(SelectionRow {
            step,
            term: term.to_string(),
            action: action.to_string(),
            value,
        });
    };
    let mut used_nums: BTreeSet<&str> = def.numeric.iter().map(String::as_str).collect();
    used_nums.extend(def.smooths.iter().map(|s| s.variable.as_str()));
    if let Some(t) = &def.tensor {
        used_nums.insert(&t.x);
        used_nums.insert(&t.z);
    }
    // Listwise deletion over every variable the model names.
    let kept: Vec<&ModelRow> = rows
        .iter()
        .filter(|r| {
            used_nums
                .iter()
                .all(|v| r.nums.get(v).copied().flatten().is_some_and(f64::is_finite))
        })
        .collect();
    if kept.len() < rows.len() {
        notes.push(format!("listwise_deleted={}", rows.len() - kept.len()));
    }
    let y: Vec<f64> = kept.iter().map(|r| def.response.of(&r.metrics)).collect();
    let skip = |msg: String, selection: Vec<SelectionRow>, mut notes: Vec<String>| {
        notes.push(format!("status=skipped: {msg}"));
        Ok(ModelOutcome {
            fit: None,
            selection,
            notes,
        })
    };
    if y.len() < 10 {
        return skip(format!("{} usable rows", y.len()), selection, notes);
    }
    if distinct(&y) < 2 {
        return skip("constant response".into(), selection, notes);
    }
    let num_col = |v: &str| -> Vec<f64> {
        kept.iter()
            .map(|r| r.nums[v].expect("kept rows are complete"))
            .collect()
    };
    let mut data = GamData::new(y);
    for v in &used_nums {
        data = data.with_numeric(v, num_col(v));
    }
    for v in def.categorical.keys() {
        let col = kept.iter().map(|r| r.cats[v.as_str()].clone()).collect();
        data = data.with_categorical(v, col);
    }

    let mut categorical: Vec<(String, String)> = Vec::new();
    for (v, reference) in &def.categorical {
        let levels: BTreeSet<&String> = data.categorical[v].iter().collect();
        if levels.len() < 2 || !levels.contains(reference) {
            log(
                v,
                "dropped_single_level_or_missing_reference",
                Some(levels.len() as f64),
                &mut selection,
            );
            continue;
        }
        categorical.push((v.clone(), reference.clone()));
    }
    let mut numeric: Vec<String> = Vec::new();
    for v in &def.numeric {
        if distinct(&data.numeric[v]) < 2 {
            log(v, "dropped_constant", None, &mut selection);
        } else {
            numeric.push(v.clone());
        }
    }
    if def.select && numeric.len() >= 2 {
        let cols: Vec<Vec<f64>> = numeric.iter().map(|v| data.numeric[v].clone()).collect();
        if let Ok(v) = stats::vif(&cols) {
            for (name, x) in numeric.iter().zip(&v) {
                log(name, "vif", Some(x.value), &mut selection);
            }
        }
        let keep = stats::vif_screen(&numeric, &cols, VIF_LIMIT)
            .map_err(|e| GamError::Spec(e.to_string()))?;
        for v in &numeric {
            if !keep.contains(v) {
                log(v, "dropped_vif", None, &mut selection);
            }
        }
        numeric.retain(|v| keep.contains(v));
    }
    let mut smooths = Vec::new();
    for s in &def.smooths {
        let d = distinct(&data.numeric[&s.variable]);
        if d < 3 {
            log(
                &s.variable,
                "dropped_smooth_too_few_values",
                Some(d as f64),
                &mut selection,
            );
            continue;
        }
        if d < s.k {
            log(&s.variable, "reduced_k", Some(d as f64), &mut selection);
        }
        smooths.push((s.variable.clone(), s.k.min(d)));
    }
    let mut tensor = None;
    if let Some(t) = &def.tensor {
        let (dx, dz) = (distinct(&data.numeric[&t.x]), distinct(&data.numeric[&t.z]));
        if dx < 3 || dz < 3 {
            log(
                &format!("ti({},{})", t.x, t.z),
                "dropped_tensor_too_few_values",
                None,
                &mut selection,
            );
        } else {
            tensor = Some((t.x.clone(), t.z.clone(), t.k1.min(dx), t.k2.min(dz)));
        }
    }

    let base_spec = |linear: &[String]| -> GamSpec {
        let mut spec = GamSpec::new(def.response.as_str(), def.family);
        if let Some(th) = def.theta {
            spec.theta = ThetaMode::Fixed(th);
        }
        if let Some(g) = &def.lambda_grid {
            spec.lambda_grid = g.clone();
        }
        for term in linear {
            match categorical.iter().find(|(v, _)| v == term) {
                Some((v, r)) => spec = spec.categorical(v, r),
                None => spec = spec.numeric(term),
            }
        }
        spec
    };
    let mut linear: Vec<String> = categorical
        .iter()
        .map(|(v, _)| v.clone())
        .chain(numeric.iter().cloned())
        .collect();
    linear.sort();
    if def.select && !linear.is_empty() {
        let result = stats::forward_stepwise_aic(&linear, |terms: &[String]| {
            gam::fit_gam(&base_spec(terms), &data).map(|f| f.aic)
        })?;
        for (term, aic) in &result.path {
            log(term, "added", Some(*aic), &mut selection);
        }
        linear = result.selected;
    }
    let mut spec = base_spec(&linear);
    for (v, k) in &smooths {
        spec = spec.smooth(v, *k);
    }
    if let Some((x, z, k1, k2)) = &tensor {
        spec = spec.tensor(x, z, *k1, *k2);
    }
    let fit = gam::fit_gam(&spec, &data)?;
    if !fit.convergence.converged {
        warn!("model {}: IRLS did not converge", def.stem());
        notes.push("status=not_converged".into());
    }
    Ok(ModelOutcome {
        fit: Some(fit),
        selection,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
time_zone = "America/Chicago"
[inputs]
links = "links.csv"
link_format = "csv"
speeds = "speeds.csv"
reports = "reports.ndjson"
[[events]]
name = "flood_aug"
type = "flood"
start = "2022-08-21T00:00"
end = "2022-08-24T00:00"
"#;

    fn parse(extra: &str) -> Result<PipelineConfig, PipelineError> {
        PipelineConfig::from_toml(&format!("{BASE}{extra}"), Path::new("/data"))
    }

    #[test]
    fn defaults_and_relative_paths() {
        let c = parse("").unwrap();
        assert_eq!(c.resilience, ResilienceParams::default());
        assert_eq!(
            c.resolve(&c.inputs.speeds),
            PathBuf::from("/data/speeds.csv")
        );
        assert_eq!(c.workspace_dir(), PathBuf::from("/data/."));
        assert_eq!(c.models().len(), 6);
        assert_eq!(c.models()[0].categorical["functional_class"], "freeway");
    }

    #[test]
    fn model_tables_parse() {
        let c = parse(
            r#"
[[models]]
response = "duration"
family = "neg_bin_log"
categorical = { functional_class = "freeway" }
numeric = ["slope"]
smooths = [{ variable = "normal_speed", k = 6 }]
tensor = { x = "lat", z = "lon" }
"#,
        )
        .unwrap();
        let m = &c.models()[0];
        assert_eq!(m.family, Family::NegBinLog);
        assert_eq!(m.tensor.as_ref().unwrap().k1, 5);
        assert!(m.select);
        assert_eq!(m.stem(), "duration");
    }

    #[test]
    fn invalid_configs_rejected() {
        for extra in [
            "[resilience]\nthreshold = 0.0\n",
            "[resilience]\ngap_tolerance = -1\n",
            "[resilience]\nlookback_days = 0\n",
            "[[events]]\nname = \"flood_aug\"\ntype = \"fog\"\nstart = \"2022-12-01T00:00\"\nend = \"2022-12-02T00:00\"\n",
            "[[events]]\nname = \"bad/name\"\ntype = \"fog\"\nstart = \"2022-12-01T00:00\"\nend = \"2022-12-02T00:00\"\n",
            "[[events]]\nname = \"late\"\ntype = \"fog\"\nstart = \"2022-12-02T00:00\"\nend = \"2022-12-01T00:00\"\n",
            "[[models]]\nresponse = \"auc\"\nfamily = \"gaussian_identity\"\nnumeric = [\"aadt\"]\n",
            "[[models]]\nresponse = \"auc\"\nfamily = \"gaussian_identity\"\nsmooths = [{ variable = \"slope\", k = 2 }]\n",
            "[[models]]\nresponse = \"auc\"\nfamily = \"gaussian_identity\"\nevent = \"nope\"\n",
            "unknown_key = 1\n",
        ] {
            let e = parse(extra).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{extra}: {e}");
        }
    }

    #[test]
    fn event_override_keeps_one_event() {
        let mut c = parse("[[events]]\nname = \"fog_dec\"\ntype = \"fog\"\nstart = \"2022-12-01T00:00\"\nend = \"2022-12-02T00:00\"\n").unwrap();
        c.apply(&Overrides {
            event: Some("fog_dec".into()),
            gap_hours: Some(0),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.events.len(), 1);
        assert_eq!(c.resilience.gap_tolerance, 0);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
            assert!(s.deps().iter().all(|d| *d < s));
        }
    }
}
