use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cardtrack"))
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn small_backtest(out: &Path, extra: &[&str]) -> Output {
    let ds = fixture();
    let mut args = vec![
        "backtest",
        "--dataset",
        ds.to_str().unwrap(),
        "--nin",
        "3y",
        "--nout",
        "1y",
        "--nmax",
        "10",
        "--cardinalities",
        "1-10",
        "--out-dir",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn fixture_backtest_is_fast_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    let o = small_backtest(&a, &[]);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["procedure"], "BE-OLS(n)");
    assert_eq!(manifest["periods"], 3);
    assert_eq!(manifest["completeness"]["attempted"], 30);
    assert_eq!(manifest["completeness"]["succeeded"], 30);
    assert_eq!(manifest["dataset"]["sha256"].as_str().unwrap().len(), 64);
    for f in ["results.csv", "returns.csv", "holdings.csv", "errors.csv", "delta/period_3.csv"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    assert_eq!(code(&small_backtest(&b, &[])), 0);
    for f in ["results.csv", "returns.csv", "holdings.csv", "delta/period_1.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "dataset = {:?}\nprocedure = \"FS-LAD(c)\"\nn_max = 6\ncardinalities = [2, 6]\nout_dir = \"out\"\n",
            fixture().display().to_string()
        ),
    )
    .unwrap();
    let o = run(&["backtest", "--config", cfg.to_str().unwrap(), "--loss", "ols"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(m.contains("\"procedure\": \"FS-OLS(c)\""));
}

#[test]
fn backward_with_short_window_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    // 30 observations for 49 eligible assets.
    let o = run(&[
        "backtest", "--dataset", fixture().to_str().unwrap(), "--nin", "30", "--nout", "20",
        "--nmax", "10", "--out-dir", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("observations"));
    assert!(!out.exists());
}

#[test]
fn bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&small_backtest(&out, &["--direction", "sideways"])), 1);
    let o = run(&[
        "backtest", "--dataset", fixture().to_str().unwrap(), "--nmax", "10",
        "--cardinalities", "11", "--out-dir", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cardinality 11"));
    assert!(!out.exists());
    assert_eq!(code(&run(&["backtest"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "backtest",
        "--dataset",
        dir.path().join("nope").to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn convert_is_idempotent_and_rejects_unknown_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ds = fixture();
    let o = run(&["convert", ds.to_str().unwrap(), "--layout", "canonical", "--out-dir", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let o = run(&["convert", a.to_str().unwrap(), "--layout", "canonical", "--out-dir", b.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    for f in ["panel.csv", "membership.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let c = dir.path().join("c");
    let o = run(&["convert", ds.to_str().unwrap(), "--layout", "bloomberg", "--out-dir", c.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(!c.exists());
}

#[test]
fn convert_long_layout() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("long.csv");
    fs::write(
        &input,
        "date,asset,price\n2020-01-02,INDEX,100\n2020-01-02,A,10\n2020-01-03,INDEX,101\n2020-01-03,A,10.5\n2020-01-03,B,3\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&["convert", input.to_str().unwrap(), "--layout", "long", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let panel = fs::read_to_string(out.join("panel.csv")).unwrap();
    assert!(panel.starts_with("date,INDEX,A,B\n2020-01-02,100,10,\n"));
}

#[test]
fn sweep_substitutes_forward_and_rejects_empty_lambdas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    fs::write(
        &cfg,
        format!(
            "dataset = {:?}\nn_max = 5\ncardinalities = [5]\n[sweep]\nn_in = [\"40\", \"300\"]\nn_out = [\"120\"]\nlambda_annual = [0.0, 5.0]\n",
            fixture().display().to_string()
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cells: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let cells = cells.as_array().unwrap();
    assert_eq!(cells.len(), 4);
    for c in cells {
        let short = c["n_in"] == "40";
        assert_eq!(c["substituted_forward"], short);
        assert_eq!(c["procedure"], if short { "FS-OLS(n)" } else { "BE-OLS(n)" });
    }
    for f in ["sensitivity_l0.csv", "sensitivity_l5.csv"] {
        assert!(out.join(f).is_file());
    }

    fs::write(
        &cfg,
        format!(
            "dataset = {:?}\n[sweep]\nlambda_annual = []\n",
            fixture().display().to_string()
        ),
    )
    .unwrap();
    let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));
}

#[test]
fn report_from_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (be, fs_run) = (dir.path().join("be"), dir.path().join("fs"));
    assert_eq!(code(&small_backtest(&be, &[])), 0);
    assert_eq!(code(&small_backtest(&fs_run, &["--direction", "fs"])), 0);

    let single = dir.path().join("single");
    let o = run(&["report", be.to_str().unwrap(), "--out-dir", single.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t1 = fs::read_to_string(single.join("table1.csv")).unwrap();
    assert!(t1.starts_with("procedure,measure,average_rank,1,"));
    // One procedure ranks first everywhere.
    assert!(t1.lines().nth(1).unwrap().starts_with("BE-OLS(n),in_sample_te,1,"));

    let both = dir.path().join("both");
    let o = run(&["report", be.to_str().unwrap(), fs_run.to_str().unwrap(), "--out-dir", both.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["table1.csv", "table2.csv", "table3.csv", "table4.csv", "table7.csv", "figure_te_curves.csv", "report.json"] {
        assert!(both.join(f).is_file(), "{f}");
    }
}

#[test]
fn report_refuses_mismatched_or_tampered_runs() {
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy");
    let o = run(&["convert", fixture().to_str().unwrap(), "--layout", "canonical", "--out-dir", copy.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    fs::write(copy.join("notes.txt"), "changes the digest").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&small_backtest(&a, &[])), 0);
    let o = run(&[
        "backtest", "--dataset", copy.to_str().unwrap(), "--nmax", "10", "--cardinalities", "1-10",
        "--out-dir", b.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let rep = dir.path().join("rep");
    let o = run(&["report", a.to_str().unwrap(), b.to_str().unwrap(), "--out-dir", rep.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("different datasets"));
    assert!(!rep.exists());

    let mut results = fs::read_to_string(a.join("results.csv")).unwrap();
    results.push_str("tampered\n");
    fs::write(a.join("results.csv"), results).unwrap();
    let o = run(&["report", a.to_str().unwrap(), "--out-dir", rep.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}
