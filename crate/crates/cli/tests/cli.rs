use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

fn psm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psm"))
        .args(args)
        .env_remove("PSM_OUT")
        .env_remove("PSM_THREADS")
        .output()
        .expect("running psm")
}

fn ok(args: &[&str]) -> String {
    let out = psm(args);
    assert!(
        out.status.success(),
        "psm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn line_count(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

fn simulate_mini(dir: &Path, seed: &str) {
    ok(&[
        "simulate",
        "--preset",
        "figure1-mini",
        "--seed",
        seed,
        "--out",
        path(dir),
    ]);
}

/// Small experiment configuration: one K, two replicates, reduced sizes.
fn small_experiment(dir: &Path) -> PathBuf {
    let cfg = dir.join("small.toml");
    fs::write(
        &cfg,
        r#"
[experiment]
k_grid = [2, 3]
replicates = 2
test_n = 400

[scenario]
n0 = 200
n_k = 150
p = 20

[transfer]
grid = [0.1, 1.0]
"#,
    )
    .unwrap();
    cfg
}

#[test]
fn simulate_writes_every_study_with_configured_sizes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("data");
    simulate_mini(&out, "3");
    assert_eq!(line_count(&out.join("target.csv")), 501);
    for k in 1..=5 {
        assert_eq!(line_count(&out.join(format!("source_{k}.csv"))), 401);
    }
    for f in ["truth.json", "manifest.json", "scenario.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let header = fs::read_to_string(out.join("target.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.starts_with("y,x1,x2,"));
    assert!(header.ends_with(",x50,z1,z2,z3,z4,z5"));
}

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate_mini(&a, "11");
    simulate_mini(&b, "11");
    for f in ["target.csv", "source_3.csv", "truth.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let c = tmp.path().join("c");
    simulate_mini(&c, "12");
    assert_ne!(
        fs::read(a.join("target.csv")).unwrap(),
        fs::read(c.join("target.csv")).unwrap()
    );
}

#[test]
fn simulate_refuses_to_overwrite_without_force() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("data");
    simulate_mini(&out, "1");
    let again = psm(&["simulate", "--preset", "figure1-mini", "--out", path(&out)]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["simulate", "--preset", "figure1-mini", "--out", path(&out), "--force"]);
}

#[test]
fn invalid_config_is_rejected_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[scenario]\nrho = 1.2\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = psm(&["simulate", "--config", path(&cfg), "--out", path(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("scenario.rho"));
    assert!(!out_dir.exists(), "no work may start before the config validates");

    fs::write(&cfg, "[transfer]\ntua = 0.1\n").unwrap();
    let out = psm(&["simulate", "--config", path(&cfg), "--out", path(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tua"));

    fs::write(&cfg, "[experiment]\nreplicates = 0\n").unwrap();
    let out = psm(&["simulate", "--config", path(&cfg), "--out", path(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("experiment.replicates"));
}

#[test]
fn naive_lasso_fit_is_quick_and_predicts() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    simulate_mini(&data, "5");
    let fit_dir = tmp.path().join("fit");
    let start = Instant::now();
    let stdout = ok(&[
        "fit",
        "--data",
        path(&data.join("manifest.json")),
        "--method",
        "naive_lasso",
        "--out",
        path(&fit_dir),
    ]);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert!(stdout.contains("nonzero"));
    let pred_dir = tmp.path().join("pred");
    ok(&[
        "predict",
        "--model",
        path(&fit_dir.join("model.json")),
        "--data",
        path(&data.join("target.csv")),
        "--out",
        path(&pred_dir),
    ]);
    let preds = fs::read_to_string(pred_dir.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 501);
    for line in preds.lines().skip(1) {
        let risk: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&risk));
    }
}

#[test]
fn targeted_psm_trace_is_monotone() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    simulate_mini(&data, "6");
    let fit_dir = tmp.path().join("fit");
    let stdout = ok(&[
        "fit",
        "--data",
        path(&data.join("manifest.json")),
        "--method",
        "targeted_psm",
        "--classes",
        "3",
        "--out",
        path(&fit_dir),
    ]);
    assert!(stdout.contains("EM iterations"));
    assert!(stdout.contains("final objective"));
    let trace = fs::read_to_string(fit_dir.join("trace.csv")).unwrap();
    let mut last: Option<(String, f64)> = None;
    let mut stages = std::collections::HashSet::new();
    for line in trace.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let (stage, value) = (parts[0].to_string(), parts[2].parse::<f64>().unwrap());
        if let Some((s, prev)) = &last {
            if *s == stage {
                assert!(value <= prev + 1e-8 * prev.abs().max(1.0), "{stage}: {prev} -> {value}");
            }
        }
        stages.insert(stage.clone());
        last = Some((stage, value));
    }
    assert!(stages.contains("joint") && stages.contains("bias"));
}

#[test]
fn mixture_method_without_structure_columns_is_a_schema_error() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let rows: String = (0..40)
        .map(|i| format!("{},{},{}\n", i % 2, (i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()))
        .collect();
    fs::write(dir.join("t.csv"), format!("y,x1,x2\n{rows}")).unwrap();
    fs::write(dir.join("s.csv"), format!("y,x1,x2\n{rows}")).unwrap();
    fs::write(
        dir.join("manifest.json"),
        r#"{"version": 1, "target": "t.csv", "sources": ["s.csv"]}"#,
    )
    .unwrap();
    let out = psm(&[
        "fit",
        "--data",
        path(&dir.join("manifest.json")),
        "--method",
        "lca_glm",
        "--out",
        path(&dir.join("fit")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fit.method") && err.contains("z1..zq"), "{err}");
    // A single-model method does not need them.
    ok(&[
        "fit",
        "--data",
        path(&dir.join("manifest.json")),
        "--method",
        "naive_lasso",
        "--out",
        path(&dir.join("fit")),
    ]);
}

#[test]
fn experiment_summary_has_every_method_and_k() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_experiment(tmp.path());
    let out = tmp.path().join("exp");
    ok(&["experiment", "--config", path(&cfg), "--out", path(&out)]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 5 * 2);
    for m in ["targeted_psm", "targeted_psm_1", "lca_glm", "trans_glm", "naive_lasso"] {
        assert_eq!(
            summary.lines().filter(|l| l.split(',').nth(1) == Some(m)).count(),
            2,
            "{m}"
        );
    }
    assert_eq!(line_count(&out.join("report.csv")), 1 + 5 * 2 * 2);
}

#[test]
fn experiment_summary_does_not_depend_on_threads() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_experiment(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&[
        "experiment",
        "--config",
        path(&cfg),
        "--out",
        path(&a),
        "--threads",
        "1",
    ]);
    ok(&[
        "experiment",
        "--config",
        path(&cfg),
        "--out",
        path(&b),
        "--threads",
        "8",
    ]);
    assert_eq!(
        fs::read_to_string(a.join("summary.csv")).unwrap(),
        fs::read_to_string(b.join("summary.csv")).unwrap()
    );
}

#[test]
fn interrupted_experiment_resumes_to_the_same_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_experiment(tmp.path());
    let full = tmp.path().join("full");
    ok(&["experiment", "--config", path(&cfg), "--out", path(&full)]);

    // Keep the header and the first finished task (one row per method).
    let part = tmp.path().join("part");
    fs::create_dir_all(&part).unwrap();
    let report = fs::read_to_string(full.join("report.csv")).unwrap();
    let kept: Vec<&str> = report.lines().take(1 + 5).collect();
    fs::write(part.join("report.csv"), kept.join("\n") + "\n").unwrap();
    fs::copy(full.join("experiment.json"), part.join("experiment.json")).unwrap();

    let refused = psm(&["experiment", "--config", path(&cfg), "--out", path(&part)]);
    assert!(!refused.status.success());
    ok(&["experiment", "--config", path(&cfg), "--out", path(&part), "--resume"]);
    assert_eq!(
        fs::read_to_string(full.join("summary.csv")).unwrap(),
        fs::read_to_string(part.join("summary.csv")).unwrap()
    );
    assert_eq!(
        line_count(&part.join("report.csv")),
        line_count(&full.join("report.csv"))
    );

    // A different configuration cannot resume these rows.
    let other = psm(&[
        "experiment",
        "--config",
        path(&cfg),
        "--out",
        path(&part),
        "--resume",
        "--seed",
        "99",
    ]);
    assert!(!other.status.success());
}

#[test]
fn lca_select_prefers_the_generating_class_count() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    simulate_mini(&data, "8");
    let sel = tmp.path().join("sel");
    let stdout = ok(&[
        "lca-select",
        "--data",
        path(&data.join("manifest.json")),
        "--classes",
        "1,2,3,4,5",
        "--out",
        path(&sel),
    ]);
    assert!(stdout.contains("lowest BIC at 3 classes"), "{stdout}");
    let table = fs::read_to_string(sel.join("lca_select.csv")).unwrap();
    let best = table
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse::<usize>().unwrap(), f[3].parse::<f64>().unwrap())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert_eq!(best.0, 3);
}

#[test]
fn lca_select_single_candidate_and_weak_separation() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("weak.toml");
    fs::write(
        &cfg,
        "[scenario]\nprevalence = \"less_separated\"\nn0 = 60\nn_k = 40\nn_sources = 1\np = 10\n",
    )
    .unwrap();
    let data = tmp.path().join("data");
    ok(&["simulate", "--config", path(&cfg), "--out", path(&data)]);
    let sel = tmp.path().join("one");
    ok(&[
        "lca-select",
        "--data",
        path(&data.join("manifest.json")),
        "--classes",
        "3",
        "--out",
        path(&sel),
    ]);
    assert_eq!(line_count(&sel.join("lca_select.csv")), 2);

    let sel = tmp.path().join("grid");
    let stdout = ok(&[
        "lca-select",
        "--data",
        path(&data.join("manifest.json")),
        "--out",
        path(&sel),
    ]);
    assert!(stdout.contains("no recovery guarantee"));
    assert_eq!(line_count(&sel.join("lca_select.csv")), 6);
}

#[test]
fn out_dir_can_come_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("env-out");
    let status = Command::new(env!("CARGO_BIN_EXE_psm"))
        .args(["simulate", "--preset", "figure1-mini"])
        .env("PSM_OUT", &out)
        .env("PSM_THREADS", "1")
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(out.join("manifest.json").exists());
}
