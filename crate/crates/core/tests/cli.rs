use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subgram")).args(args).output().expect("binary runs")
}

fn run_in(out: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(["--out", out.to_str().unwrap()]);
    run(&all)
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header = rd.headers().unwrap().iter().map(str::to_string).collect();
    let rows = rd.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

fn polyline_points(svg: &str) -> Vec<usize> {
    svg.split("<polyline")
        .skip(1)
        .map(|p| {
            let pts = p.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            pts.split_whitespace().count()
        })
        .collect()
}

#[test]
fn gen_writes_row_stochastic_sources_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["gen", "--S", "5", "--n", "3", "--alpha", "0.5", "--T", "32", "--batch", "128", "--seed", "7"];
    for d in [&a, &b] {
        let out = run_in(d, &args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let lms: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("lms.json")).unwrap()).unwrap();
    let lms = lms.as_array().unwrap();
    assert_eq!(lms.len(), 128);
    let rows = lms[0]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 25);
    for row in rows {
        let sum: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    let (header, seqs) = read_csv(&a.join("sequences.csv"));
    assert_eq!(header.len(), 33);
    assert_eq!(seqs.len(), 128);
    for f in ["lms.json", "sequences.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn gen_rejects_zero_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["gen", "--alpha", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_subgram"))
        .args(["gen", "--batch", "2", "--out", dir.path().to_str().unwrap()])
        .env("SUBGRAM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    fs::write(&cfg, r#"{"task": {"S": 3, "n": 2}, "T": 10, "batch": 4}"#).unwrap();
    let out = run_in(&dir.path().join("o"), &["gen", "--config", cfg.to_str().unwrap(), "--T", "12"]);
    assert!(out.status.success());
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen");
    assert_eq!(m["config"]["task"]["S"], 3);
    assert_eq!(m["config"]["T"], 12);
    assert_eq!(m["config"]["batch"], 4);
    assert_eq!(m["version_hash"].as_str().unwrap().len(), 64);

    fs::write(&cfg, "[1, 2]").unwrap();
    let out = run_in(&dir.path().join("p"), &["gen", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn baselines_decrease_in_k_at_long_context() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["baselines", "--S", "3", "--n", "3", "--T", "1024", "--count", "200", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&dir.path().join("baselines.csv"));
    assert_eq!(header, ["k", "raw_ce", "smoothed_ce", "pseudo", "entropy"]);
    let ce: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    let entropy: f64 = rows[0][4].parse().unwrap();
    assert_eq!(ce.len(), 3);
    assert!(ce[0] >= ce[1] && ce[1] >= ce[2], "{ce:?}");
    assert!(ce[2] >= entropy);
}

#[test]
fn gradcheck_exit_code_follows_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run_in(dir.path(), &["gradcheck", "--S", "2", "--T", "4", "--count", "2"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert!(report["max_rel_err"].as_f64().unwrap() <= 1e-5);
    assert!(dir.path().join("gradcheck.json").exists());

    let fail = run_in(dir.path(), &["gradcheck", "--S", "2", "--T", "4", "--count", "2", "--threshold", "0"]);
    assert_eq!(fail.status.code(), Some(1));
}

#[test]
fn verify_reports_no_violations_at_large_c() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["verify", "--S", "3", "--T", "16", "--k", "3", "--count", "50"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(r["violation_count"], 0);
    assert!(r["max_estimator_diff"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn probe_writes_report_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["probe", "--S", "3", "--n", "3", "--k", "2", "--cs", "4,8", "--Ts", "16,32", "--batch", "8"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&dir.path().join("stationarity.csv"));
    assert_eq!(rows.len(), 4);
    for col in ["k", "c", "T", "grad_norm_total", "grad_norm_a1", "mean_residual_tv"] {
        assert!(header.iter().any(|h| h == col), "missing {col}");
    }
    let svg = fs::read_to_string(dir.path().join("stationarity.svg")).unwrap();
    assert_eq!(polyline_points(&svg), vec![2, 2]);
}

#[test]
fn train_emits_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "train", "--S", "3", "--n", "3", "--T", "12", "--iters", "20", "--eval-every", "5", "--batch", "8",
        "--test-size", "64", "--snapshots", "0,20", "--seed", "2",
    ];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = run_in(d, &args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (_, rows) = read_csv(&a.join("metrics.csv"));
    assert_eq!(rows.len(), 5);
    for f in [
        "metrics.csv",
        "plateaus.csv",
        "params.json",
        "snapshots/a1_iter20_head0.csv",
        "snapshots/a2_iter0.csv",
        "loss.svg",
        "grad_norm.svg",
        "attention_iter0_head1.svg",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let (header, a1) = read_csv(&a.join("snapshots/a1_iter0_head0.csv"));
    assert_eq!(header.len(), 12);
    for row in &a1 {
        let s: f64 = row.iter().map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sweep_needs_two_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["sweep", "--seeds", "1", "--iters", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn render_line_heatmap_and_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("m.csv");
    fs::write(&csv_path, "iter,test_ce,baseline\n0,1.5,1.2\n10,1.3,1.2\n20,1.25,1.2\n").unwrap();
    let svg_path = dir.path().join("figs/m.svg");
    let out = run(&[
        "render",
        "--input",
        csv_path.to_str().unwrap(),
        "--output",
        svg_path.to_str().unwrap(),
        "--y",
        "test_ce",
        "--dashed",
        "baseline",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<svg") && !svg.contains("href"));
    assert_eq!(polyline_points(&svg), vec![3, 3]);

    let heat = dir.path().join("a.csv");
    fs::write(&heat, "c0,c1,c2\n1,0,0\n0.5,0.5,0\n0.2,0.3,0.5\n").unwrap();
    let out = run(&["render", "--kind", "heatmap", "--input", heat.to_str().unwrap(), "--output", svg_path.to_str().unwrap()]);
    assert!(out.status.success());
    let svg = fs::read_to_string(&svg_path).unwrap();
    let values = [1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.2, 0.3, 0.5];
    let grays: Vec<u8> = svg
        .split("fill=\"rgb(")
        .skip(1)
        .map(|s| s.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(grays.len(), 9);
    for i in 0..9 {
        for j in 0..9 {
            if values[i] > values[j] {
                assert!(grays[i] < grays[j]);
            }
        }
    }

    let out = run(&["render", "--input", dir.path().join("nope.csv").to_str().unwrap(), "--output", svg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}
