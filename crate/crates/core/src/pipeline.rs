//! Stage orchestration: ingest → features → classify → analyze → report.
//!
//! Each stage reads the text artifacts of earlier stages and returns its own
//! as an in-memory file map, so a full run and a resumed staged run follow
//! the same code path. Nothing is written until a stage (or a full run)
//! has succeeded.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assoc::{
    derive_seed, permutation_calibrate, pooled_control, results_csv, test_id, AssocError, AssociationResult,
    Calibration, Comparison, ContingencyTable, PERMUTATION_BATCH,
};
use crate::binning::{
    build_presence, eligible_cells, load_regions, make_grid, shallow_mode_counts, BinningError,
    CellKey, RegionAnchor, SeriesMode, Span, ELIGIBILITY_MIN_EXCLUSIVE,
};
use crate::catalog::{
    events_csv, filter_events, parse_ndk, read_ndk_file, CatalogError, DepthClass, MomentTensorRecord, ParseMode,
};
use crate::classifier::{confusion_table, fit_model, ClassifierError, ConfusionTable, KdeOptions, ModeLabel};
use crate::fdr::{bh_select, FdrOutcome};
use crate::tensor::{extract_features, FeatureQuality, FeatureVector};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("classification: {0}")]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Binning(#[from] BinningError),
    #[error("test {test_id}: {source}")]
    Test { test_id: String, source: AssocError },
    #[error("{file}: {message}")]
    Input { file: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn input_err(file: &str, message: impl ToString) -> PipelineError {
    PipelineError::Input {
        file: file.to_string(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdrScope {
    #[default]
    Pooled,
    PerRegion,
}

impl std::str::FromStr for FdrScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pooled" => Ok(FdrScope::Pooled),
            "per-region" => Ok(FdrScope::PerRegion),
            _ => Err(format!("unknown fdr scope {s:?} (pooled | per-region)")),
        }
    }
}

mod span_text {
    use super::Span;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(span: &Span, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&span.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Span, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Every tunable of a run. Config files use the same keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub catalog: Vec<PathBuf>,
    pub min_mw: f64,
    /// km; deeper is Deep.
    pub depth_split: f64,
    #[serde(with = "span_text")]
    pub span: Span,
    pub periods: Vec<u32>,
    pub lags: Vec<usize>,
    pub nperm: usize,
    pub q: f64,
    /// Preset name or region file.
    pub regions: String,
    pub seed: u64,
    pub fdr_scope: FdrScope,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub strict: bool,
    /// Use the catalog's listed axes when present instead of recomputing.
    pub prefer_catalog_axes: bool,
}

pub const ALLOWED_PERIODS: [u32; 2] = [26, 6];
pub const ALLOWED_LAGS: [usize; 2] = [1, 2];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            catalog: Vec::new(),
            min_mw: crate::catalog::DEFAULT_MIN_MAGNITUDE,
            depth_split: crate::catalog::DEFAULT_DEPTH_SPLIT_KM,
            span: Span::default(),
            periods: ALLOWED_PERIODS.to_vec(),
            lags: ALLOWED_LAGS.to_vec(),
            nperm: 10_000,
            q: 0.01,
            regions: "ring-of-fire".into(),
            seed: 20_100_101,
            fdr_scope: FdrScope::Pooled,
            out: PathBuf::from("cmt-out"),
            strict: false,
            prefer_catalog_axes: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn parse_mode(&self) -> ParseMode {
        if self.strict {
            ParseMode::Strict
        } else {
            ParseMode::Lenient
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if !self.min_mw.is_finite() {
            return fail(format!("min_mw {} not finite", self.min_mw));
        }
        if !(self.depth_split.is_finite() && self.depth_split > 0.0) {
            return fail(format!("depth_split {} not positive", self.depth_split));
        }
        if self.periods.is_empty() || self.periods.iter().any(|p| !ALLOWED_PERIODS.contains(p)) {
            return fail(format!("periods {:?} must be drawn from {ALLOWED_PERIODS:?}", self.periods));
        }
        if self.lags.is_empty() || self.lags.iter().any(|l| !ALLOWED_LAGS.contains(l)) {
            return fail(format!("lags {:?} must be drawn from {ALLOWED_LAGS:?}", self.lags));
        }
        if has_duplicates(&self.periods) || has_duplicates(&self.lags) {
            return fail("periods and lags must not repeat".into());
        }
        if self.nperm == 0 {
            return fail("nperm must be at least 1".into());
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return fail(format!("q {} outside (0, 1)", self.q));
        }
        Ok(())
    }
}

fn has_duplicates<T: PartialEq>(v: &[T]) -> bool {
    v.iter().enumerate().any(|(i, x)| v[..i].contains(x))
}

/// Output file name → contents.
pub type Artifacts = BTreeMap<String, String>;

pub const EVENTS_CSV: &str = "events.csv";
pub const EVENTS_JSONL: &str = "events.jsonl";
pub const FEATURES_CSV: &str = "features.csv";
pub const MODEL_JSON: &str = "model.json";
pub const LABELS_CSV: &str = "labels.csv";
pub const DENSITY_CSV: &str = "plot_density.csv";
pub const CELLS_CSV: &str = "cells.csv";
pub const RESULTS_CSV: &str = "results.csv";
pub const REPORT_JSON: &str = "report.json";
pub const RUN_META_JSON: &str = "run_meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Features,
    Classify,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Ingest, Stage::Features, Stage::Classify, Stage::Analyze, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Features => "features",
            Stage::Classify => "classify",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }

    pub fn meta_file(self) -> String {
        format!("meta_{}.json", self.as_str())
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(file: &str, text: &str) -> Result<T, PipelineError> {
    serde_json::from_str(text).map_err(|e| input_err(file, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(file: &str, text: &str) -> Result<Vec<T>, PipelineError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| input_err(file, e))
}

fn artifact<'a>(inputs: &'a Artifacts, name: &str) -> Result<&'a str, PipelineError> {
    inputs
        .get(name)
        .map(String::as_str)
        .ok_or_else(|| input_err(name, "missing (run the earlier stage first)"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedBlock {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogSummary {
    pub name: String,
    pub n_parsed: usize,
    pub skipped: Vec<SkippedBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestMeta {
    pub catalogs: Vec<CatalogSummary>,
    /// Repeated event ids; the first occurrence is kept.
    pub n_duplicates: usize,
    pub n_below_magnitude_or_outside_span: usize,
    pub n_events: usize,
}

/// Parses and filters catalog texts given as (name, contents).
pub fn stage_ingest(cfg: &RunConfig, catalogs: &[(String, String)]) -> Result<Artifacts, PipelineError> {
    let mut all = Vec::new();
    let mut summaries = Vec::new();
    for (name, text) in catalogs {
        let outcome = parse_ndk(text, cfg.parse_mode())?;
        summaries.push(CatalogSummary {
            name: name.clone(),
            n_parsed: outcome.records.len(),
            skipped: outcome
                .skipped
                .into_iter()
                .map(|(line, reason)| SkippedBlock { line, reason })
                .collect(),
        });
        all.extend(outcome.records);
    }
    let mut seen = std::collections::HashSet::new();
    let before = all.len();
    all.retain(|r| seen.insert(r.event_id.clone()));
    let n_duplicates = before - all.len();
    let mut events = filter_events(&all, cfg.min_mw, cfg.span.start(), cfg.span.end());
    events.sort_by(|a, b| a.origin_time.cmp(&b.origin_time).then_with(|| a.event_id.cmp(&b.event_id)));

    let mut jsonl = String::new();
    for r in &events {
        jsonl.push_str(&serde_json::to_string(r).expect("record serializes"));
        jsonl.push('\n');
    }
    let meta = IngestMeta {
        catalogs: summaries,
        n_duplicates,
        n_below_magnitude_or_outside_span: all.len() - events.len(),
        n_events: events.len(),
    };
    Ok(Artifacts::from([
        (EVENTS_CSV.into(), events_csv(&events)),
        (EVENTS_JSONL.into(), jsonl),
        (Stage::Ingest.meta_file(), to_json(&meta)),
    ]))
}

fn read_events(inputs: &Artifacts) -> Result<Vec<MomentTensorRecord>, PipelineError> {
    artifact(inputs, EVENTS_JSONL)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| input_err(EVENTS_JSONL, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesMeta {
    pub n_events: usize,
    pub n_shallow: usize,
    pub n_deep: usize,
    pub n_degenerate: usize,
    pub n_vertical_axis: usize,
    pub axes_source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureRow {
    event_id: String,
    az1: f64,
    az2: f64,
    az3: f64,
    plunge3: f64,
    depth_class: String,
    quality_flag: String,
}

pub fn stage_features(cfg: &RunConfig, inputs: &Artifacts) -> Result<Artifacts, PipelineError> {
    let events = read_events(inputs)?;
    let features = crate::par::map(&events, |r| extract_features(r, cfg.prefer_catalog_axes));
    let mut csv = String::from("event_id,az1,az2,az3,plunge3,depth_class,quality_flag\n");
    let mut meta = FeaturesMeta {
        n_events: events.len(),
        n_shallow: 0,
        n_deep: 0,
        n_degenerate: 0,
        n_vertical_axis: 0,
        axes_source: if cfg.prefer_catalog_axes {
            "catalog principal axes when listed, otherwise computed".into()
        } else {
            "computed from tensor components".into()
        },
    };
    for (r, f) in events.iter().zip(&features) {
        let class = r.depth_class(cfg.depth_split);
        match class {
            DepthClass::Shallow => meta.n_shallow += 1,
            DepthClass::Deep => meta.n_deep += 1,
        }
        meta.n_degenerate += usize::from(f.quality.degenerate_spectrum);
        meta.n_vertical_axis += usize::from(f.quality.vertical_axis);
        let v = f.vector;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.event_id,
            v.az1,
            v.az2,
            v.az3,
            v.plunge3,
            class.as_str(),
            f.quality.as_str()
        );
    }
    Ok(Artifacts::from([
        (FEATURES_CSV.into(), csv),
        (Stage::Features.meta_file(), to_json(&meta)),
    ]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyMeta {
    pub n_labeled: usize,
    /// Excluded from fitting and labeling: repeated eigenvalues leave the
    /// axis azimuths undefined.
    pub n_degenerate_excluded: usize,
    pub threshold: f64,
    pub crossing_found: bool,
    pub bandwidth_shallow: f64,
    pub bandwidth_deep: f64,
    pub label_counts: BTreeMap<String, usize>,
    pub confusion: ConfusionTable,
}

pub fn stage_classify(_cfg: &RunConfig, inputs: &Artifacts) -> Result<Artifacts, PipelineError> {
    let rows: Vec<FeatureRow> = read_csv(FEATURES_CSV, artifact(inputs, FEATURES_CSV)?)?;
    let mut usable = Vec::with_capacity(rows.len());
    let mut n_degenerate = 0;
    for row in &rows {
        let class = DepthClass::parse(&row.depth_class)
            .ok_or_else(|| input_err(FEATURES_CSV, format!("bad depth class {:?}", row.depth_class)))?;
        let quality = FeatureQuality::parse(&row.quality_flag)
            .ok_or_else(|| input_err(FEATURES_CSV, format!("bad quality flag {:?}", row.quality_flag)))?;
        if quality.degenerate_spectrum {
            n_degenerate += 1;
            continue;
        }
        let v = FeatureVector::from_array([row.az1, row.az2, row.az3, row.plunge3]);
        usable.push((row.event_id.as_str(), v, class));
    }
    let split = |c: DepthClass| -> Vec<FeatureVector> {
        usable.iter().filter(|u| u.2 == c).map(|u| u.1).collect()
    };
    let fit = fit_model(&split(DepthClass::Shallow), &split(DepthClass::Deep), &KdeOptions::default())?;
    let model = &fit.model;

    let mut labels_csv = String::from("event_id,projection,label\n");
    let mut labels = Vec::with_capacity(usable.len());
    let mut label_counts: BTreeMap<String, usize> = ModeLabel::ALL.iter().map(|l| (l.as_str().into(), 0)).collect();
    for (id, v, class) in &usable {
        let projection = model.project(v);
        let label = crate::classifier::classify_projection(projection, model.threshold, *class);
        labels.push(label);
        *label_counts.entry(label.as_str().into()).or_default() += 1;
        let _ = writeln!(labels_csv, "{id},{projection},{label}");
    }
    let mut density = String::from("class,x,density\n");
    for (name, d) in [("shallow", &fit.density_shallow), ("deep", &fit.density_deep)] {
        for (x, y) in d.grid.iter().zip(&d.values) {
            let _ = writeln!(density, "{name},{x},{y}");
        }
    }
    let meta = ClassifyMeta {
        n_labeled: labels.len(),
        n_degenerate_excluded: n_degenerate,
        threshold: model.threshold,
        crossing_found: model.fit_metadata.crossing_found,
        bandwidth_shallow: model.bandwidth_shallow,
        bandwidth_deep: model.bandwidth_deep,
        label_counts,
        confusion: confusion_table(&labels),
    };
    Ok(Artifacts::from([
        (MODEL_JSON.into(), to_json(model)),
        (LABELS_CSV.into(), labels_csv),
        (DENSITY_CSV.into(), density),
        (Stage::Classify.meta_file(), to_json(&meta)),
    ]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeMeta {
    pub regions: Vec<RegionAnchor>,
    pub n_cells: usize,
    pub n_eligible_cells: usize,
    pub eligibility: String,
    pub n_tests: usize,
    pub n_permutations: usize,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct LabelRow {
    event_id: String,
    #[allow(dead_code)]
    projection: f64,
    label: String,
}

pub const NO_ELIGIBLE_CELLS: &str = "no eligible cells: no cell has more than 5 events of each shallow mode";

fn presence_file(ppy: u32) -> String {
    format!("presence_p{ppy}.csv")
}

#[derive(Debug, Clone, Copy)]
struct TestSpec {
    cell: usize,
    ppy_index: usize,
    lag: usize,
    comparison: Comparison,
}

pub fn stage_analyze(cfg: &RunConfig, inputs: &Artifacts) -> Result<Artifacts, PipelineError> {
    let events = read_events(inputs)?;
    let labels: Vec<LabelRow> = read_csv(LABELS_CSV, artifact(inputs, LABELS_CSV)?)?;
    let by_id: HashMap<&str, &MomentTensorRecord> = events.iter().map(|r| (r.event_id.as_str(), r)).collect();
    let mut located = Vec::with_capacity(labels.len());
    for row in &labels {
        let label = ModeLabel::parse(&row.label)
            .ok_or_else(|| input_err(LABELS_CSV, format!("bad label {:?}", row.label)))?;
        let r = by_id
            .get(row.event_id.as_str())
            .ok_or_else(|| input_err(LABELS_CSV, format!("unknown event {}", row.event_id)))?;
        located.push((r, label));
    }

    let regions = load_regions(&cfg.regions)?;
    let grid = make_grid(&regions)?;
    let triples: Vec<(f64, f64, ModeLabel)> = located.iter().map(|(r, l)| (r.latitude, r.longitude, *l)).collect();
    let counts = shallow_mode_counts(&grid, &triples);
    let eligible = eligible_cells(&grid, &triples);

    let mut cells_csv = String::from("region_id,sub_index,lat_min,lon_min,n_shallow1,n_shallow2,eligible\n");
    for (cell, (a, b)) in grid.iter().zip(&counts) {
        let ok = *a > ELIGIBILITY_MIN_EXCLUSIVE && *b > ELIGIBILITY_MIN_EXCLUSIVE;
        let _ = writeln!(
            cells_csv,
            "{},{},{},{},{a},{b},{ok}",
            cell.region_id, cell.sub_index, cell.lat_min, cell.lon_min
        );
    }

    // Shallow event times per eligible cell and mode.
    let mut times = vec![[Vec::new(), Vec::new()]; eligible.len()];
    for (r, label) in &located {
        let mode = match label {
            ModeLabel::Shallow1 => 0,
            ModeLabel::Shallow2 => 1,
            _ => continue,
        };
        if let Some(i) = eligible.iter().position(|c| c.contains(r.latitude, r.longitude)) {
            times[i][mode].push(r.origin_time);
        }
    }
    let mut out = Artifacts::new();
    // series[cell][ppy_index] = [shallow1, shallow2, pooled]
    let mut series = vec![Vec::with_capacity(cfg.periods.len()); eligible.len()];
    for &ppy in &cfg.periods {
        let mut presence = String::from("region_id,sub_index,mode,period_index,bit\n");
        for (i, cell) in eligible.iter().enumerate() {
            let pooled_times = times[i][0].iter().chain(&times[i][1]).copied();
            let built = [
                build_presence(times[i][0].iter().copied(), *cell, SeriesMode::Shallow1, ppy, cfg.span)?,
                build_presence(times[i][1].iter().copied(), *cell, SeriesMode::Shallow2, ppy, cfg.span)?,
                build_presence(pooled_times, *cell, SeriesMode::Pooled, ppy, cfg.span)?,
            ];
            for s in &built {
                for (t, &bit) in s.bits.iter().enumerate() {
                    let _ = writeln!(
                        presence,
                        "{},{},{},{t},{}",
                        cell.region_id,
                        cell.sub_index,
                        s.mode.as_str(),
                        u8::from(bit)
                    );
                }
            }
            series[i].push(built.map(|s| s.bits));
        }
        out.insert(presence_file(ppy), presence);
    }

    let mut specs = Vec::new();
    for cell in 0..eligible.len() {
        for ppy_index in 0..cfg.periods.len() {
            for &lag in &cfg.lags {
                for comparison in Comparison::ALL {
                    specs.push(TestSpec {
                        cell,
                        ppy_index,
                        lag,
                        comparison,
                    });
                }
            }
        }
    }
    let results = crate::par::map(&specs, |t| {
        let key = eligible[t.cell].key();
        let ppy = cfg.periods[t.ppy_index];
        let seed = derive_seed(cfg.seed, key, t.comparison, t.lag, ppy);
        let [v1, v2, pooled] = &series[t.cell][t.ppy_index];
        let calibration = match t.comparison {
            Comparison::Pooled => pooled_control(pooled, t.lag, cfg.nperm, seed),
            c => permutation_calibrate(v1, v2, t.lag, c, cfg.nperm, seed),
        };
        calibration
            .map(|calibration| AssociationResult {
                cell: key,
                comparison: t.comparison,
                lag: t.lag,
                periods_per_year: ppy,
                calibration,
            })
            .map_err(|source| PipelineError::Test {
                test_id: test_id(key, t.comparison, t.lag, ppy),
                source,
            })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let notices = if eligible.is_empty() {
        vec![NO_ELIGIBLE_CELLS.to_string()]
    } else {
        Vec::new()
    };
    let meta = AnalyzeMeta {
        regions,
        n_cells: grid.len(),
        n_eligible_cells: eligible.len(),
        eligibility: format!("more than {ELIGIBILITY_MIN_EXCLUSIVE} events of each shallow mode"),
        n_tests: results.len(),
        n_permutations: cfg.nperm,
        notices,
    };
    out.insert(CELLS_CSV.into(), cells_csv);
    out.insert(RESULTS_CSV.into(), results_csv(&results));
    out.insert(Stage::Analyze.meta_file(), to_json(&meta));
    Ok(out)
}

#[derive(Debug, Clone, Deserialize)]
struct ResultRow {
    region_id: u32,
    sub_index: u8,
    comparison: String,
    lag: usize,
    periods_per_year: u32,
    n11: u64,
    n10: u64,
    n01: u64,
    n00: u64,
    chi_square: f64,
    log_odds: f64,
    p_value: f64,
    log_odds_percentile: f64,
    degenerate: bool,
    seed: u64,
}

fn read_results(text: &str, n_permutations: usize) -> Result<Vec<AssociationResult>, PipelineError> {
    read_csv::<ResultRow>(RESULTS_CSV, text)?
        .into_iter()
        .map(|r| {
            let comparison = Comparison::parse(&r.comparison)
                .ok_or_else(|| input_err(RESULTS_CSV, format!("bad comparison {:?}", r.comparison)))?;
            Ok(AssociationResult {
                cell: CellKey {
                    region_id: r.region_id,
                    sub_index: r.sub_index,
                },
                comparison,
                lag: r.lag,
                periods_per_year: r.periods_per_year,
                calibration: Calibration {
                    table: ContingencyTable::from_counts(r.n11, r.n10, r.n01, r.n00),
                    chi_square: r.chi_square,
                    log_odds: r.log_odds,
                    p_value: r.p_value,
                    log_odds_percentile: r.log_odds_percentile,
                    n_permutations,
                    seed: r.seed,
                    degenerate: r.degenerate,
                },
            })
        })
        .collect()
}

/// Tukey box-plot summary with type-7 quartiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Most extreme values within 1.5 IQR of the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

fn quantile_sorted(x: &[f64], p: f64) -> f64 {
    let h = (x.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(x.len() - 1);
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

impl BoxSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut x = values.to_vec();
        x.sort_by(f64::total_cmp);
        let (q1, median, q3) = (
            quantile_sorted(&x, 0.25),
            quantile_sorted(&x, 0.5),
            quantile_sorted(&x, 0.75),
        );
        let fence = 1.5 * (q3 - q1);
        let (lo_fence, hi_fence) = (q1 - fence, q3 + fence);
        let inside: Vec<f64> = x.iter().copied().filter(|v| (lo_fence..=hi_fence).contains(v)).collect();
        Some(Self {
            n: x.len(),
            min: x[0],
            q1,
            median,
            q3,
            max: x[x.len() - 1],
            whisker_low: inside.first().copied().unwrap_or(q1),
            whisker_high: inside.last().copied().unwrap_or(q3),
            outliers: x.iter().copied().filter(|v| !(lo_fence..=hi_fence).contains(v)).collect(),
        })
    }
}

/// One point of an ordered p-value panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderedPoint {
    pub test_id: String,
    pub rank: usize,
    pub p_value: f64,
    /// rank · q / m within the point's FDR family.
    pub bh_threshold: f64,
    pub interesting: bool,
}

/// BH outcome for one comparison at one (lag, periods per year).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyPanel {
    pub comparison: Comparison,
    pub m: usize,
    pub n_selected: usize,
    /// Per-family BH outcomes; one entry under pooled scope, one per region
    /// otherwise.
    pub families: Vec<FamilyOutcome>,
    /// All tests of the comparison ordered by p (ties in test order).
    pub points: Vec<OrderedPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyOutcome {
    pub name: String,
    pub region_id: Option<u32>,
    pub m: usize,
    pub threshold_rank: usize,
}

/// The five panels for one (lag, periods per year).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSet {
    pub lag: usize,
    pub periods_per_year: u32,
    pub q: f64,
    pub fdr_scope: FdrScope,
    /// Within, cross, pooled control.
    pub ordered: Vec<FamilyPanel>,
    pub log_odds_within: Option<BoxSummary>,
    pub log_odds_cross: Option<BoxSummary>,
    pub selected_within: Vec<SelectedTest>,
    pub selected_cross: Vec<SelectedTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedTest {
    pub test_id: String,
    pub p_value: f64,
    pub log_odds: f64,
    pub log_odds_percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub notices: Vec<String>,
    pub n_events: usize,
    pub n_eligible_cells: usize,
    pub n_tests: usize,
    pub confusion: ConfusionTable,
    pub threshold: f64,
    pub panels: Vec<PanelSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub p_value: String,
    pub log_odds: String,
    pub log_odds_percentile: String,
    pub degenerate_tables: String,
    pub permutation: String,
    pub seeds: String,
    pub fdr_families: String,
    pub magnitude: String,
    pub time_periods: String,
    pub labels: String,
}

fn conventions(cfg: &RunConfig) -> Conventions {
    Conventions {
        p_value: "#{chi2_perm >= chi2_obs} / n_permutations (ties count toward p)".into(),
        log_odds: "ln((n11+1/2)(n00+1/2) / ((n10+1/2)(n01+1/2)))".into(),
        log_odds_percentile: "#{log_odds_perm < log_odds_obs} / n_permutations".into(),
        degenerate_tables: "chi-square 0 and degenerate=true when any margin is zero".into(),
        permutation: format!(
            "each full presence series shuffled independently, then the lagged table rebuilt; ChaCha8 with one stream per batch of {PERMUTATION_BATCH} permutations"
        ),
        seeds: "per-test seed = SplitMix64 chain over (seed, region_id, sub_index, comparison, lag, periods_per_year)".into(),
        fdr_families: match cfg.fdr_scope {
            FdrScope::Pooled => "Benjamini-Hochberg per (comparison, lag, periods_per_year) across all eligible cells",
            FdrScope::PerRegion => "Benjamini-Hochberg per (comparison, lag, periods_per_year, region)",
        }
        .into(),
        magnitude: "Mw = 2/3 (log10 M0 - 16.1) from the catalog scalar moment (dyne-cm)".into(),
        time_periods: "each calendar year split into periods_per_year equal slots, to the second".into(),
        labels: "projection >= threshold gives mode 2".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub conventions: Conventions,
    pub ingest: IngestMeta,
    pub features: FeaturesMeta,
    pub classify: ClassifyMeta,
    pub analyze: AnalyzeMeta,
}

fn family_name(comparison: Comparison, lag: usize, ppy: u32, region: Option<u32>) -> String {
    let base = format!("{}_lag{lag}_p{ppy}", comparison.as_str());
    match region {
        Some(r) => format!("{base}_r{r}"),
        None => base,
    }
}

fn ordered_p_plot_csv(outcome: &FdrOutcome) -> String {
    let mut s = String::from("rank,p_value,bh_line,interesting\n");
    for t in &outcome.sorted {
        let _ = writeln!(s, "{},{},{},{}", t.rank, t.p_value, t.bh_threshold, t.interesting);
    }
    s
}

fn build_panel(
    cfg: &RunConfig,
    results: &[AssociationResult],
    lag: usize,
    ppy: u32,
    out: &mut Artifacts,
) -> Result<PanelSet, PipelineError> {
    let mut ordered = Vec::new();
    let mut selected: HashMap<Comparison, Vec<SelectedTest>> = HashMap::new();
    for comparison in Comparison::ALL {
        let tests: Vec<&AssociationResult> = results
            .iter()
            .filter(|r| r.comparison == comparison && r.lag == lag && r.periods_per_year == ppy)
            .collect();
        let groups: Vec<(Option<u32>, Vec<&AssociationResult>)> = match cfg.fdr_scope {
            FdrScope::Pooled => vec![(None, tests.clone())],
            FdrScope::PerRegion => {
                let mut ids: Vec<u32> = tests.iter().map(|t| t.cell.region_id).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.into_iter()
                    .map(|id| (Some(id), tests.iter().copied().filter(|t| t.cell.region_id == id).collect()))
                    .collect()
            }
        };
        let mut families = Vec::new();
        let mut points = Vec::new();
        for (region, group) in groups.into_iter().filter(|(_, g)| !g.is_empty()) {
            let name = family_name(comparison, lag, ppy, region);
            let ids: Vec<(String, f64)> = group.iter().map(|t| (t.test_id(), t.calibration.p_value)).collect();
            let outcome = bh_select(&ids, cfg.q).map_err(|e| input_err(RESULTS_CSV, e))?;
            out.insert(format!("fdr_{name}.csv"), outcome.to_csv());
            out.insert(format!("plot_ordered_p_{name}.csv"), ordered_p_plot_csv(&outcome));
            for (t, &flag) in group.iter().zip(&outcome.interesting) {
                if flag {
                    selected.entry(comparison).or_default().push(SelectedTest {
                        test_id: t.test_id(),
                        p_value: t.calibration.p_value,
                        log_odds: t.calibration.log_odds,
                        log_odds_percentile: t.calibration.log_odds_percentile,
                    });
                }
            }
            points.extend(outcome.sorted.iter().map(|s| OrderedPoint {
                test_id: s.id.clone(),
                rank: s.rank,
                p_value: s.p_value,
                bh_threshold: s.bh_threshold,
                interesting: s.interesting,
            }));
            families.push(FamilyOutcome {
                name,
                region_id: region,
                m: outcome.m,
                threshold_rank: outcome.threshold_rank,
            });
        }
        // Across regions, rank by p over the whole comparison.
        if families.len() > 1 {
            points.sort_by(|a, b| a.p_value.total_cmp(&b.p_value));
            for (k, p) in points.iter_mut().enumerate() {
                p.rank = k + 1;
            }
        }
        ordered.push(FamilyPanel {
            comparison,
            m: tests.len(),
            n_selected: families.iter().map(|f| f.threshold_rank).sum(),
            families,
            points,
        });
    }

    let take = |c: Comparison, selected: &mut HashMap<Comparison, Vec<SelectedTest>>| {
        let mut v = selected.remove(&c).unwrap_or_default();
        v.sort_by(|a, b| a.test_id.cmp(&b.test_id));
        v
    };
    let selected_within = take(Comparison::WithinModes, &mut selected);
    let selected_cross = take(Comparison::CrossModes, &mut selected);
    let values = |v: &[SelectedTest]| v.iter().map(|s| s.log_odds).collect::<Vec<_>>();

    let mut lo_csv = String::from("comparison,test_id,log_odds\n");
    let mut pct_csv = String::from("comparison,test_id,log_odds_percentile\n");
    for (c, v) in [(Comparison::WithinModes, &selected_within), (Comparison::CrossModes, &selected_cross)] {
        for s in v {
            let _ = writeln!(lo_csv, "{},{},{}", c.as_str(), s.test_id, s.log_odds);
            let _ = writeln!(pct_csv, "{},{},{}", c.as_str(), s.test_id, s.log_odds_percentile);
        }
    }
    let tag = format!("lag{lag}_p{ppy}");
    out.insert(format!("plot_log_odds_{tag}.csv"), lo_csv);
    out.insert(format!("plot_percentile_{tag}.csv"), pct_csv);

    let panel = PanelSet {
        lag,
        periods_per_year: ppy,
        q: cfg.q,
        fdr_scope: cfg.fdr_scope,
        ordered,
        log_odds_within: BoxSummary::from_values(&values(&selected_within)),
        log_odds_cross: BoxSummary::from_values(&values(&selected_cross)),
        selected_within,
        selected_cross,
    };
    out.insert(format!("figure_{tag}.svg"), crate::plots::render_panels(&panel));
    Ok(panel)
}

pub fn stage_report(cfg: &RunConfig, inputs: &Artifacts) -> Result<(RunReport, Artifacts), PipelineError> {
    let meta_of = |s: Stage| -> Result<&str, PipelineError> { artifact(inputs, &s.meta_file()) };
    let ingest: IngestMeta = from_json("meta_ingest.json", meta_of(Stage::Ingest)?)?;
    let features: FeaturesMeta = from_json("meta_features.json", meta_of(Stage::Features)?)?;
    let classify: ClassifyMeta = from_json("meta_classify.json", meta_of(Stage::Classify)?)?;
    let analyze: AnalyzeMeta = from_json("meta_analyze.json", meta_of(Stage::Analyze)?)?;
    let results = read_results(artifact(inputs, RESULTS_CSV)?, analyze.n_permutations)?;

    let mut out = Artifacts::new();
    let mut panels = Vec::new();
    for &ppy in &cfg.periods {
        for &lag in &cfg.lags {
            panels.push(build_panel(cfg, &results, lag, ppy, &mut out)?);
        }
    }
    let report = RunReport {
        notices: analyze.notices.clone(),
        n_events: ingest.n_events,
        n_eligible_cells: analyze.n_eligible_cells,
        n_tests: results.len(),
        confusion: classify.confusion,
        threshold: classify.threshold,
        panels,
    };
    let meta = RunMeta {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        conventions: conventions(cfg),
        ingest,
        features,
        classify,
        analyze,
    };
    out.insert(REPORT_JSON.into(), to_json(&report));
    out.insert(RUN_META_JSON.into(), to_json(&meta));
    Ok((report, out))
}

/// Reads every configured catalog as (file name, text).
pub fn read_catalogs(cfg: &RunConfig) -> Result<Vec<(String, String)>, PipelineError> {
    if cfg.catalog.is_empty() {
        return Err(PipelineError::Config("no catalog given".into()));
    }
    cfg.catalog
        .iter()
        .map(|p| Ok((p.display().to_string(), read_ndk_file(p)?)))
        .collect()
}

/// All stages in memory; returns the report and every output file.
pub fn run_analysis(cfg: &RunConfig) -> Result<(RunReport, Artifacts), PipelineError> {
    cfg.validate()?;
    let catalogs = read_catalogs(cfg)?;
    run_analysis_on(cfg, &catalogs)
}

/// [`run_analysis`] on catalog texts already in memory.
pub fn run_analysis_on(cfg: &RunConfig, catalogs: &[(String, String)]) -> Result<(RunReport, Artifacts), PipelineError> {
    cfg.validate()?;
    let mut all = stage_ingest(cfg, catalogs)?;
    all.extend(stage_features(cfg, &all)?);
    all.extend(stage_classify(cfg, &all)?);
    all.extend(stage_analyze(cfg, &all)?);
    let (report, out) = stage_report(cfg, &all)?;
    all.extend(out);
    Ok((report, all))
}

/// Files each stage reads from the output directory.
fn stage_inputs(stage: Stage) -> Vec<String> {
    match stage {
        Stage::Ingest => vec![],
        Stage::Features => vec![EVENTS_JSONL.into()],
        Stage::Classify => vec![FEATURES_CSV.into()],
        Stage::Analyze => vec![EVENTS_JSONL.into(), LABELS_CSV.into()],
        Stage::Report => {
            let mut v: Vec<String> = [Stage::Ingest, Stage::Features, Stage::Classify, Stage::Analyze]
                .iter()
                .map(|s| s.meta_file())
                .collect();
            v.push(RESULTS_CSV.into());
            v
        }
    }
}

/// Runs one stage against the files in `cfg.out` and writes its outputs.
pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<Option<RunReport>, PipelineError> {
    cfg.validate()?;
    let mut inputs = Artifacts::new();
    for name in stage_inputs(stage) {
        let path = cfg.out.join(&name);
        let text = std::fs::read_to_string(&path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        inputs.insert(name, text);
    }
    let (report, out) = match stage {
        Stage::Ingest => (None, stage_ingest(cfg, &read_catalogs(cfg)?)?),
        Stage::Features => (None, stage_features(cfg, &inputs)?),
        Stage::Classify => (None, stage_classify(cfg, &inputs)?),
        Stage::Analyze => (None, stage_analyze(cfg, &inputs)?),
        Stage::Report => {
            let (r, out) = stage_report(cfg, &inputs)?;
            (Some(r), out)
        }
    };
    write_artifacts(&cfg.out, &out)?;
    Ok(report)
}

pub fn write_artifacts(dir: &Path, files: &Artifacts) -> Result<(), PipelineError> {
    let io = |path: &Path, source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (name, contents) in files {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| io(&path, e))?;
    }
    Ok(())
}

/// Runs the whole pipeline and writes every output into `cfg.out`.
pub fn run_and_write(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    let (report, files) = run_analysis(cfg)?;
    write_artifacts(&cfg.out, &files)?;
    Ok(report)
}
