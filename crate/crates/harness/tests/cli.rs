use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use asgd_harness::plotdata::{emit_plot_data, series_names};

fn asgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asgd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn asgd")
}

const SMALL: [&str; 10] = [
    "--n", "400", "--test-size", "200", "--panel-size", "32", "--horizon", "80", "--eval-every", "20",
];

fn run_in(verb: &str, dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![verb, "--output-dir", dir.to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    asgd(&args)
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn twin_run_writes_trace_summary_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("twin");
    let out = run_in("run", &dir, &["--replicates", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "summary.csv", "curves.csv", "trace_r0.csv"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert!(!dir.join("trace_r1.csv").exists());
    let trace = csv_rows(&dir.join("trace_r0.csv"));
    assert_eq!(trace.len(), 1 + 81);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["kind"], "twin-run");
    assert_eq!(manifest["config"]["horizon"], 80);
    let files: Vec<&str> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(files.contains(&"trace_r0.csv"));
}

#[test]
fn delay_sweep_has_one_summary_row_per_delay() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sweep");
    let out = run_in("sweep", &dir, &["--replicates", "2", "--tau-bars", "0,2,5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.join("summary.csv"));
    assert_eq!(rows.len(), 4);
    let taus: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(taus, ["0", "2", "5"]);
    assert!(dir.join("trace_tau5_c0.5_r1.csv").is_file());

    let plot = emit_plot_data(std::slice::from_ref(&dir), &["delta".into(), "gap_loss".into()]).unwrap();
    assert_eq!(series_names(&plot).len(), 6);
    assert_eq!(plot.len(), 6 * 5);
}

#[test]
fn rate_sweep_series_are_named_by_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("rate");
    let out = run_in("sweep", &dir, &["--kind", "rate-sweep", "--replicates", "1", "--cs", "0.1,0.3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let plot = tmp.path().join("plot.csv");
    let out = asgd(&[
        "plotdata",
        "--input",
        dir.to_str().unwrap(),
        "--metric",
        "delta",
        "--output",
        plot.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&plot);
    assert_eq!(rows[0], "series,x,y,y_err");
    assert!(rows[1].starts_with("delta[c=0.1],"));
    assert!(rows.iter().any(|r| r.starts_with("delta[c=0.3],")));
}

#[test]
fn bounds_verb_writes_both_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("b");
    let out = asgd(&["bounds", "--output-dir", dir.to_str().unwrap(), "--tau-bars", "0,1", "--cs", "0.5"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(csv_rows(&dir.join("bounds.csv")).len(), 1 + 2 * 3);
    assert_eq!(csv_rows(&dir.join("theorem2.csv")).len(), 1 + 2 * 3);
}

#[test]
fn replay_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(run_in("run", &a, &["--replicates", "2", "--tau-bar", "3"]).status.code(), Some(0));
    let manifest = a.join("manifest.json");
    let out = asgd(&["replay", "--manifest", manifest.to_str().unwrap(), "--output-dir", b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["summary.csv", "curves.csv", "trace_r0.csv", "trace_r1.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_and_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "kind = \"single-run\"\nreplicates = 3\nn = 400\ntest_size = 100\nhorizon = 50\n").unwrap();
    let dir = tmp.path().join("single");
    let out = asgd(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--replicates",
        "2",
        "--output-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("run_r1.csv").is_file());
    assert!(!dir.join("run_r2.csv").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = out.to_str().unwrap();
    assert_eq!(asgd(&["--help"]).status.code(), Some(0));
    assert_eq!(asgd(&["run", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(asgd(&["run", "--p", "7", "--output-dir", o]).status.code(), Some(1));
    assert_eq!(asgd(&["run", "--horizon", "ten", "--output-dir", o]).status.code(), Some(1));
    assert_eq!(asgd(&["sweep", "--kind", "bound-sweep", "--output-dir", o]).status.code(), Some(1));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "horizon = 10\nwidth = 3\n").unwrap();
    let code = asgd(&["run", "--config", bad.to_str().unwrap(), "--output-dir", o]).status.code();
    assert_eq!(code, Some(1));

    let missing = tmp.path().join("none");
    let code = asgd(&["plotdata", "--input", missing.to_str().unwrap()]).status.code();
    assert_eq!(code, Some(2));
    let code = asgd(&["replay", "--manifest", missing.to_str().unwrap()]).status.code();
    assert_eq!(code, Some(2));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = asgd_harness::ExperimentConfig::from_file(&path).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
