use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dpcox(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dpcox"));
    cmd.args(args).env_remove("DPCOX_OUT_DIR");
    if let Some(d) = env_out {
        cmd.env("DPCOX_OUT_DIR", d);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for f in [&a, &b] {
        ok(&dpcox(&["simulate", "--setting", "hard", "--scenario", "a", "--n", "600", "--seed", "7", "--out", p(f)], None));
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(bytes).unwrap().lines().count(), 601);
    assert!(dir.path().join("a.csv.manifest.toml").exists());
}

#[test]
fn flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seed = 3\nn = 50\n").unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    ok(&dpcox(&["simulate", "--config", p(&cfg), "--seed", "9", "--out", p(&a)], None));
    ok(&dpcox(&["simulate", "--n", "50", "--seed", "9", "--out", p(&b)], None));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let manifest = fs::read_to_string(dir.path().join("a.csv.manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 9"), "{manifest}");
}

#[test]
fn fit_proposed_writes_retained_draws_without_touching_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&dpcox(&["simulate", "--setting", "easy", "--n", "200", "--seed", "7", "--out", p(&data)], None));
    let before = fs::read(&data).unwrap();
    let out = dir.path().join("fit");
    ok(&dpcox(
        &["fit", "--method", "proposed", "--data", p(&data), "--iters", "1200", "--burnin", "200", "--seed", "1", "--out-dir", p(&out)],
        None,
    ));
    let draws = fs::read_to_string(out.join("draws.csv")).unwrap();
    assert_eq!(draws.lines().count(), 1 + 1000);
    assert!(draws.starts_with("iter,beta_a,"));
    assert!(fs::read_to_string(out.join("summary.csv")).unwrap().contains("\nexposure,"));
    assert!(out.join("manifest.toml").exists());
    assert_eq!(before, fs::read(&data).unwrap());
}

#[test]
fn fit_baselines_and_env_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&dpcox(&["simulate", "--n", "300", "--seed", "2", "--out", p(&data)], None));
    let env_dir = dir.path().join("env");
    ok(&dpcox(&["fit", "--method", "naive,2sls,2sri,infeasible", "--data", p(&data)], Some(&env_dir)));
    let fits = fs::read_to_string(env_dir.join("fits.csv")).unwrap();
    for m in ["naive", "2sls", "2sri", "infeasible"] {
        assert!(fits.lines().any(|l| l.starts_with(&format!("{m},"))), "{fits}");
    }
}

#[test]
fn benchmark_report_and_manifest_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let args = [
        "benchmark", "--setting", "easy", "--scenario", "a", "--n", "100", "--reps", "2", "--methods",
        "naive,proposed,2sls,2sri,infeasible", "--iters", "40", "--burnin", "10", "--pilot-sweeps", "4", "--jobs", "1",
        "--out-dir", p(&out),
    ];
    ok(&dpcox(&args, None));
    let metrics = fs::read(out.join("metrics.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&metrics).lines().count(), 1 + 5);
    let reps = fs::read(out.join("replications.csv")).unwrap();
    for f in ["boxplot.csv", "contingency.csv", "manifest.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let rerun = dir.path().join("rerun.toml");
    fs::copy(out.join("manifest.toml"), &rerun).unwrap();
    fs::remove_dir_all(&out).unwrap();
    ok(&dpcox(&["benchmark", "--config", p(&rerun)], None));
    assert_eq!(metrics, fs::read(out.join("metrics.csv")).unwrap());
    assert_eq!(reps, fs::read(out.join("replications.csv")).unwrap());

    let agg = dir.path().join("agg");
    ok(&dpcox(&["report", "--input", p(&out.join("replications.csv")), "--out-dir", p(&agg)], None));
    assert_eq!(metrics, fs::read(agg.join("metrics.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dpcox(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(dpcox(&[], None).status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nunknown_key = 2\n").unwrap();
    let out = dpcox(&["simulate", "--config", p(&bad), "--out", p(&dir.path().join("x.csv"))], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    let inv = dir.path().join("inv.toml");
    fs::write(&inv, "iters = 100\nburnin = 200\n").unwrap();
    let out = dpcox(&["fit", "--config", p(&inv), "--data", "whatever.csv"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("burn_in < total_iters violated"));

    let missing = dir.path().join("missing.csv");
    let out = dpcox(&["fit", "--method", "naive", "--data", p(&missing), "--out-dir", p(dir.path())], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    assert_eq!(dpcox(&["simulate", "--config", p(&dir.path().join("nope.toml"))], None).status.code(), Some(1));
}
