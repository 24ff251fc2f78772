use std::collections::BTreeMap;
use std::path::Path;

use cmt_assoc::binning::{RegionAnchor, Span};
use cmt_assoc::catalog::to_ndk;
use cmt_assoc::pipeline::{
    run_analysis_on, run_and_write, run_stage, FdrScope, RunConfig, Stage, NO_ELIGIBLE_CELLS, RESULTS_CSV,
};
use cmt_assoc::synth::{synthetic_catalog, SynthCatalogSpec};

fn regions() -> Vec<RegionAnchor> {
    vec![
        RegionAnchor {
            id: 3,
            name: "west".into(),
            lat_min: 30.0,
            lon_min: 135.0,
        },
        RegionAnchor {
            id: 7,
            name: "east".into(),
            lat_min: -30.0,
            lon_min: -75.0,
        },
    ]
}

fn catalog(spec: &SynthCatalogSpec) -> String {
    synthetic_catalog(spec).unwrap().iter().map(to_ndk).collect()
}

fn setup(dir: &Path, spec: &SynthCatalogSpec) -> RunConfig {
    let ndk = dir.join("synthetic.ndk");
    std::fs::write(&ndk, catalog(spec)).unwrap();
    let region_file = dir.join("regions.toml");
    let body: String = spec
        .regions
        .iter()
        .map(|r| format!("[[regions]]\nid = {}\nname = \"{}\"\nlat_min = {}\nlon_min = {}\n", r.id, r.name, r.lat_min, r.lon_min))
        .collect();
    std::fs::write(&region_file, body).unwrap();
    RunConfig {
        catalog: vec![ndk],
        span: spec.span,
        nperm: 1000,
        regions: region_file.display().to_string(),
        ..RunConfig::default()
    }
}

fn spec(seed: u64) -> SynthCatalogSpec {
    SynthCatalogSpec {
        regions: regions(),
        span: Span {
            start_year: 2003,
            end_year: 2010,
        },
        seed,
        ..SynthCatalogSpec::default()
    }
}

fn read_dir(dir: &Path) -> BTreeMap<String, String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read_to_string(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn staged_run_writes_the_same_files_as_a_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = setup(tmp.path(), &spec(11));
    cfg.out = tmp.path().join("full");
    run_and_write(&cfg).unwrap();
    cfg.out = tmp.path().join("staged");
    for stage in Stage::ALL {
        let report = run_stage(&cfg, stage).unwrap();
        assert_eq!(report.is_some(), stage == Stage::Report);
    }
    let full = read_dir(&tmp.path().join("full"));
    let staged = read_dir(&tmp.path().join("staged"));
    assert_eq!(full.keys().collect::<Vec<_>>(), staged.keys().collect::<Vec<_>>());
    for (name, text) in &full {
        assert!(staged[name] == *text, "{name} differs");
    }
}

#[test]
fn staged_run_needs_the_previous_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = setup(tmp.path(), &spec(11));
    cfg.out = tmp.path().join("empty");
    let err = run_stage(&cfg, Stage::Classify).unwrap_err().to_string();
    assert!(err.contains("features.csv"), "{err}");
}

#[test]
fn repeated_runs_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), &spec(12));
    let catalogs = cmt_assoc::pipeline::read_catalogs(&cfg).unwrap();
    let (r1, a1) = run_analysis_on(&cfg, &catalogs).unwrap();
    let (r2, a2) = run_analysis_on(&cfg, &catalogs).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(a1, a2);
}

#[test]
fn seed_changes_p_values_but_not_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = setup(tmp.path(), &spec(13));
    let catalogs = cmt_assoc::pipeline::read_catalogs(&cfg).unwrap();
    let (_, a) = run_analysis_on(&cfg, &catalogs).unwrap();
    cfg.seed += 1;
    let (_, b) = run_analysis_on(&cfg, &catalogs).unwrap();
    let rows = |s: &str| -> Vec<Vec<String>> {
        s.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
    };
    let header: Vec<&str> = a[RESULTS_CSV].lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (ra, rb) = (rows(&a[RESULTS_CSV]), rows(&b[RESULTS_CSV]));
    assert_eq!(ra.len(), rb.len());
    assert!(!ra.is_empty());
    for (x, y) in ra.iter().zip(&rb) {
        for name in ["region_id", "sub_index", "comparison", "lag", "chi_square", "log_odds"] {
            assert_eq!(x[col(name)], y[col(name)]);
        }
    }
    assert!(ra.iter().zip(&rb).any(|(x, y)| x[col("p_value")] != y[col("p_value")]));
}

#[test]
fn too_few_events_gives_a_notice_not_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let quiet = SynthCatalogSpec {
        base_rate: 0.002,
        self_excite: 0.0,
        cross_inhibit: 0.0,
        ..spec(14)
    };
    let cfg = setup(tmp.path(), &quiet);
    let catalogs = cmt_assoc::pipeline::read_catalogs(&cfg).unwrap();
    let (report, files) = run_analysis_on(&cfg, &catalogs).unwrap();
    assert_eq!(report.n_eligible_cells, 0);
    assert_eq!(report.n_tests, 0);
    assert!(report.notices.iter().any(|n| n == NO_ELIGIBLE_CELLS));
    assert_eq!(files[RESULTS_CSV].lines().count(), 1);
}

#[test]
fn self_exciting_modes_show_up_as_positive_within_association() {
    let tmp = tempfile::tempdir().unwrap();
    let strong = SynthCatalogSpec {
        span: Span {
            start_year: 1977,
            end_year: 2010,
        },
        ..spec(15)
    };
    let mut cfg = setup(tmp.path(), &strong);
    cfg.periods = vec![26];
    cfg.lags = vec![1];
    let catalogs = cmt_assoc::pipeline::read_catalogs(&cfg).unwrap();
    let (report, _) = run_analysis_on(&cfg, &catalogs).unwrap();
    let panel = &report.panels[0];
    assert!(!panel.selected_within.is_empty());
    assert!(panel.selected_within.iter().all(|t| t.log_odds > 0.0));
    assert!(panel.selected_cross.iter().all(|t| t.log_odds < 0.0));
}

#[test]
fn per_region_scope_reports_one_family_per_region() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = setup(tmp.path(), &spec(16));
    cfg.fdr_scope = FdrScope::PerRegion;
    let catalogs = cmt_assoc::pipeline::read_catalogs(&cfg).unwrap();
    let (report, files) = run_analysis_on(&cfg, &catalogs).unwrap();
    assert!(report.n_eligible_cells > 0);
    for panel in &report.panels {
        for family in &panel.ordered {
            assert!(family.families.iter().all(|f| f.region_id.is_some()));
            assert_eq!(family.families.iter().map(|f| f.m).sum::<usize>(), family.m);
        }
    }
    assert!(files.keys().any(|k| k.starts_with("fdr_within_lag1_p26_r")));
}

#[test]
fn no_events_in_span_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = setup(tmp.path(), &spec(17));
    cfg.span = Span {
        start_year: 1980,
        end_year: 1985,
    };
    let catalogs = cmt_assoc::pipeline::read_catalogs(&cfg).unwrap();
    assert!(run_analysis_on(&cfg, &catalogs).is_err());
}
