use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_koopman-uq"));
    c.env("RUST_LOG", "warn");
    c
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let path = self.dir.path().join(name);
        fs::write(&path, text).unwrap();
        path
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str], config: Option<&Path>, out: &Path) -> Output {
        self.run_with(bin(), args, config, out)
    }

    fn run_with(&self, mut c: Command, args: &[&str], config: Option<&Path>, out: &Path) -> Output {
        c.args(args).arg("--out").arg(out);
        if let Some(p) = config {
            c.arg("--config").arg(p);
        }
        c.output().unwrap()
    }

    fn entries(&self) -> Vec<String> {
        let mut names: Vec<String> = fs::read_dir(self.dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names
    }
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], k: usize) -> Vec<f64> {
    rows.iter().map(|r| r[k].parse().unwrap()).collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn grid_l2(report: &Value, key: &str) -> f64 {
    report[key]["grid_l2"].as_f64().unwrap()
}

const HARMONIC: &str = r#"
[system]
kind = "harmonic"
[basis]
order = 2
[edmd]
samples = 200
[reduction]
order = 2
[grid]
points = 101
"#;

#[test]
fn default_eigen_writes_two_spectra_of_55() {
    let ws = Workspace::new();
    let out = ws.out("eigen");
    ok(&ws.run(&["eigen"], None, &out));
    for file in ["eigenvalues_galerkin.csv", "eigenvalues_edmd.csv"] {
        assert_eq!(read_csv(&out.join(file)).len(), 55, "{file}");
    }
    let report = json(&out.join("eigen_report.json"));
    assert_eq!(
        report["eigenvalues"]["pairing"].as_array().unwrap().len(),
        55
    );
    assert!(
        report["eigenvalues"]["max_abs_re_galerkin"]
            .as_f64()
            .unwrap()
            < 1e-6
    );
    let manifest = json(&out.join("resolved_config.json"));
    assert_eq!(manifest["command"], "eigen");
    assert_eq!(manifest["config"]["basis"]["order"], 9);
    assert_eq!(manifest["config"]["system"]["epsilon"], 0.01);
    let listed: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["file"].as_str().unwrap())
        .collect();
    assert_eq!(
        listed,
        [
            "eigenvalues_galerkin.csv",
            "eigenvalues_edmd.csv",
            "eigen_report.json"
        ]
    );
}

#[test]
fn linear_oscillator_spectrum_has_zero_and_unit_frequencies() {
    let ws = Workspace::new();
    let cfg = ws.config("h.toml", HARMONIC);
    let out = ws.out("eigen");
    ok(&ws.run(&["eigen", "--order", "1"], Some(&cfg), &out));
    let rows = read_csv(&out.join("eigenvalues_galerkin.csv"));
    let (re, im) = (column(&rows, 0), column(&rows, 1));
    for want in [0.0, 1.0, -1.0] {
        assert!(
            re.iter()
                .zip(&im)
                .any(|(r, i)| r.abs() < 1e-9 && (i - want).abs() < 1e-9),
            "{want}i missing from {re:?} {im:?}"
        );
    }
}

#[test]
fn malformed_config_fails_without_output() {
    let ws = Workspace::new();
    let cfg = ws.config("bad.toml", "[basis]\norder = 9\nunknown_key = 1\n");
    let out = ws.out("run");
    let res = ws.run(&["eigen"], Some(&cfg), &out);
    assert_eq!(res.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(
        stderr.contains("unknown_key") && stderr.contains("line 3"),
        "{stderr}"
    );
    assert_eq!(ws.entries(), ["bad.toml"]);

    let cfg = ws.config("legs.toml", "[schedule]\nlegs = [1.0]\n");
    assert_eq!(
        ws.run(&["recursive"], Some(&cfg), &out).status.code(),
        Some(2)
    );
    assert_eq!(
        ws.run(&["eigen"], Some(&ws.out("missing.toml")), &out)
            .status
            .code(),
        Some(2)
    );
    assert!(!out.exists());
}

#[test]
fn numeric_failure_leaves_no_partial_output() {
    let ws = Workspace::new();
    // a prior far outside the basis box vanishes on every grid point
    let cfg = ws.config(
        "far.toml",
        &format!("{HARMONIC}[prior]\nmean = [20.0, 20.0]\n[schedule]\nlegs = [0.0, 0.5]\n"),
    );
    let out = ws.out("run");
    assert_eq!(
        ws.run(&["recursive"], Some(&cfg), &out).status.code(),
        Some(3)
    );
    assert_eq!(ws.entries(), ["far.toml"]);
}

#[test]
fn foreign_output_directory_is_not_replaced() {
    let ws = Workspace::new();
    let out = ws.out("mine");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("notes.txt"), "keep").unwrap();
    let cfg = ws.config("h.toml", HARMONIC);
    assert_eq!(
        ws.run(&["snapshots"], Some(&cfg), &out).status.code(),
        Some(4)
    );
    assert_eq!(fs::read_to_string(out.join("notes.txt")).unwrap(), "keep");
}

#[test]
fn zero_horizon_state_errors_are_reconstruction_only() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "zero.toml",
        "[schedule]\nlegs = [0.0]\n[basis]\norder = 3\n",
    );
    let out = ws.out("state");
    ok(&ws.run(&["propagate-state"], Some(&cfg), &out));
    let rows = read_csv(&out.join("state_error.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(column(&rows, 0), [0.0]);
    // x is in the span of any basis of order ≥ 1
    assert!(
        column(&rows, 1)[0] < 1e-12 && column(&rows, 2)[0] < 1e-12,
        "{rows:?}"
    );
}

#[test]
fn default_state_errors_grow_and_edmd_ends_above_galerkin() {
    let ws = Workspace::new();
    let out = ws.out("state");
    ok(&ws.run(&["propagate-state"], None, &out));
    let rows = read_csv(&out.join("state_error.csv"));
    assert_eq!(rows.len(), 101);
    assert_eq!(column(&rows, 0).last(), Some(&500.0));
    for k in [1, 2] {
        let e = column(&rows, k);
        let early: f64 = e[1..11].iter().sum();
        let late: f64 = e[91..].iter().sum();
        assert!(late > early, "column {k}: {early} → {late}");
    }
    let report = json(&out.join("state_report.json"));
    let s = &report["state_error"];
    assert!(
        s["final_edmd"].as_f64().unwrap() >= s["final_galerkin"].as_f64().unwrap(),
        "{s}"
    );
}

#[test]
fn zero_duration_density_is_the_prior() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "zero.toml",
        "[schedule]\nlegs = [0.0]\n[basis]\norder = 3\n",
    );
    let out = ws.out("pdf");
    ok(&ws.run(&["propagate-pdf", "--mc-samples", "0"], Some(&cfg), &out));
    let ko = column(&read_csv(&out.join("density_ko.csv")), 2);
    let prior = column(&read_csv(&out.join("density_prior.csv")), 2);
    let num: f64 = ko.iter().zip(&prior).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = prior.iter().map(|b| b * b).sum();
    assert!((num / den).sqrt() < 1e-8);
    assert!(!out.join("density_mc.csv").exists());
}

#[test]
fn harmonic_density_matches_the_rotated_gaussian() {
    let ws = Workspace::new();
    let cfg = ws.config("h.toml", &format!("{HARMONIC}[schedule]\nlegs = [2.0]\n"));
    let out = ws.out("pdf");
    ok(&ws.run(&["propagate-pdf", "--mc-samples", "2000"], Some(&cfg), &out));
    let report = json(&out.join("pdf_report.json"));
    assert!(
        report["metadata"]["analytic"]["grid_l2"].as_f64().unwrap() < 1e-4,
        "{report}"
    );
    assert_eq!(read_csv(&out.join("mc_samples.csv")).len(), 2000);
    assert!(report["density"]["grid_l2"].as_f64().unwrap().is_finite());
}

#[test]
fn default_duffing_density_agrees_with_monte_carlo() {
    let ws = Workspace::new();
    let out = ws.out("pdf");
    ok(&ws.run(&["propagate-pdf"], None, &out));
    let report = json(&out.join("pdf_report.json"));
    let d = &report["density"];
    let (l2, pointwise) = (
        d["grid_l2"].as_f64().unwrap(),
        d["max_pointwise"].as_f64().unwrap(),
    );
    assert!(
        l2 < 0.15 && pointwise < 0.2,
        "relative L2 {l2}, max-pointwise {pointwise}"
    );
}

#[test]
fn two_empty_legs_return_the_prior() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "zero.toml",
        "[schedule]\nlegs = [0.0, 0.0]\n[basis]\norder = 3\n",
    );
    let out = ws.out("rec");
    ok(&ws.run(&["recursive"], Some(&cfg), &out));
    let report = json(&out.join("recursive_report.json"));
    assert!(grid_l2(&report, "density") < 1e-6, "{report}");
    let fit = &report["metadata"]["reductions"][0]["diagnostics"];
    assert!(
        fit["held_out_relative_rms"].as_f64().unwrap() < 1e-8,
        "{fit}"
    );
    for k in 0..=2 {
        assert!(out.join(format!("density_leg{k}.csv")).is_file());
    }
    assert!(out.join("reduced_leg1.json").is_file());
}

#[test]
fn linear_recursion_is_exact() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "h.toml",
        &format!("{HARMONIC}[schedule]\nlegs = [0.5, 0.7]\n"),
    );
    let out = ws.out("rec");
    ok(&ws.run(&["recursive"], Some(&cfg), &out));
    let report = json(&out.join("recursive_report.json"));
    assert!(grid_l2(&report, "density") < 1e-6, "{report}");
    assert!(
        report["metadata"]["analytic"]["grid_l2"].as_f64().unwrap() < 1e-6,
        "{report}"
    );
}

/// Every output file by name. The manifest is compared without the output
/// directory, which necessarily differs between the two runs.
fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let name = e.file_name().to_string_lossy().into_owned();
            let mut bytes = fs::read(e.path()).unwrap();
            if name == "resolved_config.json" {
                let mut m: Value = serde_json::from_slice(&bytes).unwrap();
                m["config"]["output"].take();
                bytes = serde_json::to_vec(&m).unwrap();
            }
            (name, bytes)
        })
        .collect();
    v.sort();
    v
}

fn assert_identical(a: &Path, b: &Path) {
    let (fa, fb) = (files(a), files(b));
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
}

fn threads(n: usize) -> Command {
    let mut c = bin();
    c.env("RAYON_NUM_THREADS", n.to_string());
    c
}

#[test]
fn runs_are_byte_identical_across_thread_counts() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "h.toml",
        "[basis]\norder = 4\n[edmd]\nsamples = 500\n[schedule]\nlegs = [3.0, 3.0]\n[grid]\npoints = 41\n",
    );
    for cmd in ["recursive", "eigen", "propagate-state", "snapshots"] {
        let (a, b) = (ws.out(&format!("{cmd}-a")), ws.out(&format!("{cmd}-b")));
        ok(&ws.run_with(threads(4), &[cmd], Some(&cfg), &a));
        ok(&ws.run_with(threads(1), &[cmd], Some(&cfg), &b));
        assert_identical(&a, &b);
    }
    let single = ws.config(
        "one.toml",
        "[basis]\norder = 4\n[schedule]\nlegs = [3.0]\n[grid]\npoints = 41\n[monte_carlo]\nsamples = 3000\n",
    );
    let (a, b) = (ws.out("pdf-a"), ws.out("pdf-b"));
    ok(&ws.run_with(threads(4), &["propagate-pdf"], Some(&single), &a));
    ok(&ws.run_with(threads(1), &["propagate-pdf"], Some(&single), &b));
    assert_identical(&a, &b);
}

#[test]
fn flags_override_the_file_and_are_echoed() {
    let ws = Workspace::new();
    let cfg = ws.config("h.toml", &format!("{HARMONIC}[schedule]\nlegs = [1.0]\n"));
    let out = ws.out("pdf");
    ok(&ws.run(
        &[
            "propagate-pdf",
            "--order",
            "3",
            "--seed",
            "5",
            "--mc-samples",
            "100",
        ],
        Some(&cfg),
        &out,
    ));
    let c = &json(&out.join("resolved_config.json"))["config"];
    assert_eq!(c["basis"]["order"], 3);
    assert_eq!(
        (
            c["edmd"]["seed"].as_u64(),
            c["monte_carlo"]["seed"].as_u64()
        ),
        (Some(5), Some(5))
    );
    assert_eq!(c["monte_carlo"]["samples"], 100);
    assert_eq!(c["prior"]["covariance"][0][0], 0.1f64 * 0.1);
    assert_eq!(c["state"]["initial"], serde_json::json!([0.4, 0.6]));
    assert_eq!(c["grid"]["lower"], serde_json::json!([-1.5, -1.5]));
    // the echoed config reproduces the run
    let echoed: Value = c.clone();
    let toml_text = toml::to_string(&echoed).unwrap();
    let again = ws.config("again.toml", &toml_text);
    let out2 = ws.out("pdf2");
    ok(&ws.run(&["propagate-pdf"], Some(&again), &out2));
    assert_eq!(
        fs::read(out.join("density_mc.csv")).unwrap(),
        fs::read(out2.join("density_mc.csv")).unwrap()
    );
}

#[test]
fn snapshots_round_trip_through_the_library() {
    let ws = Workspace::new();
    let cfg = ws.config("h.toml", HARMONIC);
    let out = ws.out("snap");
    ok(&ws.run(&["snapshots", "--seed", "3"], Some(&cfg), &out));
    let snap = koopman_uq::dynamics::SnapshotSet::load(&out.join("snapshots.csv")).unwrap();
    assert_eq!(snap.len(), 200);
    assert_eq!(snap.meta().seed, 3);
}
