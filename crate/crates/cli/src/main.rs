use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cmt_assoc::binning::{load_regions, Span};
use cmt_assoc::catalog::to_ndk;
use cmt_assoc::pipeline::{run_and_write, run_stage, FdrScope, RunConfig, RunReport, Stage};
use cmt_assoc::synth::{synthetic_catalog, SynthCatalogSpec};

/// Failure-mode classification of CMT earthquakes and permutation tests of
/// temporal association between modes.
#[derive(Parser)]
#[command(name = "cmt-assoc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and filter NDK catalogs (events.csv, events.jsonl)
    Ingest(RunArgs),
    /// Principal-axis features per event (features.csv)
    Features(RunArgs),
    /// Fit the projection classifier and label events (model.json, labels.csv)
    Classify(RunArgs),
    /// Presence series and permutation tests per eligible cell (results.csv)
    Analyze(RunArgs),
    /// FDR selection, plot data and SVG panels (report.json, run_meta.json)
    Report(RunArgs),
    /// All stages in one go; nothing is written unless every stage succeeds
    Run(RunArgs),
    /// Write a synthetic NDK catalog with self-exciting failure modes
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with the same keys as the flags; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// NDK catalog file(s), plain or gzip
    #[arg(long, value_delimiter = ',')]
    catalog: Vec<PathBuf>,
    /// Keep events with Mw strictly above this
    #[arg(long)]
    min_mw: Option<f64>,
    /// Depth (km) separating shallow from deep events
    #[arg(long)]
    depth_split: Option<f64>,
    /// Inclusive year range, START:END
    #[arg(long)]
    span: Option<Span>,
    /// Periods per year (26 and/or 6)
    #[arg(long, value_delimiter = ',')]
    periods: Option<Vec<u32>>,
    /// Lags in periods (1 and/or 2)
    #[arg(long, value_delimiter = ',')]
    lags: Option<Vec<usize>>,
    /// Permutations per test
    #[arg(long)]
    nperm: Option<usize>,
    /// Benjamini-Hochberg false discovery rate
    #[arg(long)]
    q: Option<f64>,
    /// Region preset (ring-of-fire) or TOML/JSON region file
    #[arg(long)]
    regions: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// pooled | per-region
    #[arg(long)]
    fdr_scope: Option<FdrScope>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail on the first malformed NDK block instead of skipping it
    #[arg(long)]
    strict: bool,
    /// Recompute principal axes from the tensor even when the catalog lists them
    #[arg(long)]
    recompute_axes: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => RunConfig::default(),
        };
        if !self.catalog.is_empty() {
            c.catalog = self.catalog.clone();
        }
        macro_rules! take {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = &self.$field { c.$target = v.clone(); })*
            };
        }
        take!(min_mw => min_mw, depth_split => depth_split, span => span, periods => periods,
              lags => lags, nperm => nperm, q => q, regions => regions, seed => seed,
              fdr_scope => fdr_scope, out => out);
        c.strict |= self.strict;
        if self.recompute_axes {
            c.prefer_catalog_axes = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Destination NDK file
    #[arg(long)]
    out: PathBuf,
    /// Region preset or file; defaults to a single synthetic region
    #[arg(long)]
    regions: Option<String>,
    #[arg(long, default_value = "1977:2010")]
    span: Span,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Per-period probability of each shallow mode
    #[arg(long, default_value_t = 0.2)]
    base_rate: f64,
    /// Added probability when the same mode occurred in the previous period
    #[arg(long, default_value_t = 0.4)]
    self_excite: f64,
    /// Subtracted probability when the other mode occurred in the previous period
    #[arg(long, default_value_t = 0.4)]
    cross_inhibit: f64,
    /// Per-period probability of a deep event in each cell
    #[arg(long, default_value_t = 0.05)]
    deep_rate: f64,
}

fn print_report(report: &RunReport) {
    for n in &report.notices {
        println!("notice: {n}");
    }
    println!(
        "{} events, {} eligible cells, {} tests, threshold {:.4}",
        report.n_events, report.n_eligible_cells, report.n_tests, report.threshold
    );
    let c = report.confusion.counts;
    println!(
        "confusion (actual x predicted): shallow [{}, {}], deep [{}, {}]",
        c[0][0], c[0][1], c[1][0], c[1][1]
    );
    for p in &report.panels {
        let counts: Vec<String> = p
            .ordered
            .iter()
            .map(|f| format!("{} {}/{}", f.comparison.as_str(), f.n_selected, f.m))
            .collect();
        println!("lag {} p{}: selected {}", p.lag, p.periods_per_year, counts.join(", "));
    }
}

fn stage(args: &RunArgs, stage: Stage) -> Result<()> {
    let cfg = args.config()?;
    if let Some(report) = run_stage(&cfg, stage).with_context(|| format!("{} stage", stage.as_str()))? {
        print_report(&report);
    }
    println!("wrote {} outputs to {}", stage.as_str(), cfg.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Ingest(a) => stage(a, Stage::Ingest),
        Command::Features(a) => stage(a, Stage::Features),
        Command::Classify(a) => stage(a, Stage::Classify),
        Command::Analyze(a) => stage(a, Stage::Analyze),
        Command::Report(a) => stage(a, Stage::Report),
        Command::Run(a) => {
            let cfg = a.config()?;
            let report = run_and_write(&cfg)?;
            print_report(&report);
            println!("wrote outputs to {}", cfg.out.display());
            Ok(())
        }
        Command::Synth(a) => {
            let mut spec = SynthCatalogSpec {
                span: a.span,
                seed: a.seed,
                base_rate: a.base_rate,
                self_excite: a.self_excite,
                cross_inhibit: a.cross_inhibit,
                deep_rate: a.deep_rate,
                ..SynthCatalogSpec::default()
            };
            if let Some(r) = &a.regions {
                spec.regions = load_regions(r)?;
            }
            let records = synthetic_catalog(&spec)?;
            let text: String = records.iter().map(to_ndk).collect();
            std::fs::write(&a.out, text).with_context(|| a.out.display().to_string())?;
            println!("wrote {} synthetic events to {}", records.len(), a.out.display());
            Ok(())
        }
    }
}
