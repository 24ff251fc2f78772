use std::path::Path;
use std::process::{Command, Output};

fn cmt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmt-assoc"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "stdout:\n{stdout}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

const REGIONS: &str = "[[regions]]\nid = 1\nname = \"test\"\nlat_min = -15.0\nlon_min = 150.0\n";

fn synth(dir: &Path) {
    std::fs::write(dir.join("regions.toml"), REGIONS).unwrap();
    ok(cmt(
        &["synth", "--out", "cat.ndk", "--regions", "regions.toml", "--span", "2001:2010", "--seed", "4"],
        dir,
    ));
}

const RUN: [&str; 8] = [
    "--catalog", "cat.ndk", "--regions", "regions.toml", "--span", "2001:2010", "--nperm", "500",
];

#[test]
fn synth_then_run_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let stdout = ok(cmt(&[&["run"][..], &RUN, &["--out", "out"]].concat(), tmp.path()));
    assert!(stdout.contains("eligible cells"), "{stdout}");
    for f in ["events.csv", "features.csv", "model.json", "labels.csv", "results.csv", "report.json", "run_meta.json"] {
        assert!(tmp.path().join("out").join(f).is_file(), "{f} missing");
    }
}

#[test]
fn staged_subcommands_match_run() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    ok(cmt(&[&["run"][..], &RUN, &["--out", "full"]].concat(), tmp.path()));
    for stage in ["ingest", "features", "classify", "analyze", "report"] {
        ok(cmt(&[&[stage][..], &RUN, &["--out", "staged"]].concat(), tmp.path()));
    }
    for f in ["results.csv", "report.json", "labels.csv", "model.json"] {
        let a = std::fs::read_to_string(tmp.path().join("full").join(f)).unwrap();
        let b = std::fs::read_to_string(tmp.path().join("staged").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    std::fs::write(
        tmp.path().join("run.toml"),
        "catalog = [\"cat.ndk\"]\nregions = \"regions.toml\"\nspan = \"2001:2010\"\nnperm = 200\nperiods = [6]\nlags = [2]\n",
    )
    .unwrap();
    ok(cmt(&["run", "--config", "run.toml", "--lags", "1", "--out", "out"], tmp.path()));
    let meta = std::fs::read_to_string(tmp.path().join("out/run_meta.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&meta).unwrap();
    assert_eq!(meta["config"]["nperm"], 200);
    assert_eq!(meta["config"]["periods"], serde_json::json!([6]));
    assert_eq!(meta["config"]["lags"], serde_json::json!([1]));
}

#[test]
fn invalid_settings_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    for bad in [&["--q", "1.5"][..], &["--lags", "3"], &["--periods", "12"], &["--nperm", "0"]] {
        let out = cmt(&[&["run"][..], &RUN, bad].concat(), tmp.path());
        assert!(!out.status.success(), "{bad:?} accepted");
    }
}

#[test]
fn missing_catalog_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cmt(&["run", "--catalog", "nope.ndk", "--out", "out"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ndk"));
    assert!(!tmp.path().join("out").exists());
}
