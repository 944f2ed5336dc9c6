use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))
}

fn coagfrag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coagfrag")).args(args).env_remove("COAGFRAG_WORKERS").output().unwrap()
}

fn exec(cmd: &str, scenario: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    coagfrag(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_scenario(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn column(csv: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(k).unwrap().parse().unwrap()).collect()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(csv_files(&p));
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
    out.sort();
    out
}

const CONSTANT_DB: &str = r#"
name = "unit"
[coagulation]
kind = "constant"
value = 1.0
[fragmentation]
kind = "constant"
value = 1.0
[boundary]
amplitude = 1.0
decay = 1.0
[initial]
kind = "density"
amplitude = 1.0
[grid]
kind = "uniform"
n = 32
[solver]
t_final = 1.0
"#;

#[test]
fn pure_coag_decay_has_monotone_count_and_full_manifest() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let o = exec("run", &bundled("pure_coag_decay"), &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m0 = column(&out.join("diagnostics.csv"), "m0");
    assert_eq!(m0.len(), 101);
    assert!(m0.windows(2).all(|w| w[1] <= w[0]));

    let m = json(&out.join("manifest.json"));
    assert_eq!(m["tool"], "coagfrag");
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["seed"], 1);
    let s = &m["scenario"];
    for (section, key) in [
        ("solver", "dt_max"),
        ("solver", "safety"),
        ("solver", "quad_n"),
        ("solver", "scheme"),
        ("solver", "track_residual"),
        ("boundary", "cutoff"),
        ("boundary", "power"),
        ("analysis", "probes"),
        ("analysis", "spread_tolerance"),
        ("analysis", "bound_samples"),
        ("oracle", "tolerance"),
        ("initial", "upper"),
        ("fragmentation", "kind"),
    ] {
        assert!(!s[section][key].is_null(), "manifest lacks {section}.{key}");
    }
    let outputs = m["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|v| v == "diagnostics.csv"));
    assert_eq!(outputs.iter().filter(|v| v.as_str().unwrap().starts_with("snapshots/")).count(), 101);
}

#[test]
fn decay_rate_clears_the_lower_bound() {
    // 0.9 K1 ∫_1^∞ y^{1/2} e^{-y} dy by the trapezoid rule.
    let n = 400_000;
    let h = 59.0 / n as f64;
    let f = |y: f64| y.sqrt() * (-y).exp();
    let theta = h * ((1..n).map(|k| f(1.0 + k as f64 * h)).sum::<f64>() + 0.5 * (f(1.0) + f(60.0)));
    let dir = TempDir::new().unwrap();
    let o = exec("decay-fit", &bundled("pure_coag_decay"), dir.path(), &[]);
    assert_eq!(code(&o), 0);
    let fit = json(&dir.path().join("decay_fit.json"));
    let rate = fit["rate"].as_f64().unwrap();
    assert!(rate >= 0.9 * theta, "rate {rate} vs {}", 0.9 * theta);
    assert!(fit["r_squared"].as_f64().unwrap() > 0.99);
}

#[test]
fn detailed_balance_relax_dissipates_entropy() {
    let dir = TempDir::new().unwrap();
    let o = exec("run", &bundled("detailed_balance_relax"), dir.path(), &[]);
    assert_eq!(code(&o), 0);
    let h = column(&dir.path().join("diagnostics.csv"), "entropy");
    assert!(h.windows(2).all(|w| w[1] <= w[0] + 1e-6));
    assert!(h[h.len() - 1] < 1e-3 * h[0]);
    let d = column(&dir.path().join("diagnostics.csv"), "dissipation");
    assert!(d.iter().all(|&x| x >= 0.0));
    assert!(dir.path().join("equilibrium.csv").exists());
    let res = fs::read_to_string(dir.path().join("residuals.csv")).unwrap();
    assert_eq!(res.lines().next().unwrap().split(',').count(), 21);
}

#[test]
fn reruns_are_bitwise_identical() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(code(&exec("run", &bundled("detailed_balance_relax"), out, &["--seed", "7"])), 0);
    }
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    assert_eq!(fa.len(), fb.len());
    assert!(fa.len() > 40);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    assert_eq!(json(&a.join("manifest.json"))["seed"], 7);
}

#[test]
fn snapshot_override() {
    let dir = TempDir::new().unwrap();
    let o = exec("run", &bundled("lattice"), dir.path(), &["--snapshots", "4"]);
    assert_eq!(code(&o), 0);
    assert_eq!(column(&dir.path().join("diagnostics.csv"), "t"), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["scenario"]["solver"]["snapshot_interval"], 0.25);
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let bad = write_scenario(&dir, "bad.toml", "[coagulation]\nkind = \"constant\"\n[grid\n");
    assert_eq!(code(&exec("run", &bad, &out, &[])), 2);
    let typo = write_scenario(&dir, "typo.toml", &CONSTANT_DB.replace("t_final", "tfinal"));
    assert_eq!(code(&exec("run", &typo, &out, &[])), 2);
    let neg = write_scenario(&dir, "neg.toml", &CONSTANT_DB.replace("n = 32", "n = 0"));
    assert_eq!(code(&exec("run", &neg, &out, &[])), 2);
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&exec("run", &missing, &out, &[])), 2);
    assert!(!out.exists());
}

#[test]
fn stiffness_exits_3_without_outputs() {
    let dir = TempDir::new().unwrap();
    let text = fs::read_to_string(bundled("lattice")).unwrap().replace("value = 1.0", "value = 1e9").replace("dt_max = 1e-3", "dt_max = 1.0");
    let p = write_scenario(&dir, "stiff.toml", &text);
    let out = dir.path().join("out");
    let o = exec("run", &p, &out, &[]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stiff"));
    assert!(!out.exists());
}

#[test]
fn equilibrium_of_unit_kernels_is_exponential() {
    let dir = TempDir::new().unwrap();
    let p = write_scenario(&dir, "unit.toml", CONSTANT_DB);
    let o = exec("equilibrium", &p, dir.path(), &[]);
    assert_eq!(code(&o), 0);
    let report = json(&dir.path().join("equilibrium.json"));
    assert!(report["spread"].as_f64().unwrap() < 1e-12);
    assert_eq!(report["detailed_balance"], true);
    let csv = dir.path().join("equilibrium.csv");
    let (l, r, x, c) = (column_s(&csv, "left"), column_s(&csv, "right"), column_s(&csv, "pivot"), column_s(&csv, "count"));
    assert_eq!(x.len(), 32);
    for i in 0..32 {
        let density = c[i] / (r[i] - l[i]);
        assert!((density - (-x[i]).exp()).abs() < 1e-12);
    }
}

/// A state-file column without the atom row.
fn column_s(csv: &Path, name: &str) -> Vec<f64> {
    let mut v = column(csv, name);
    v.pop();
    v
}

#[test]
fn equilibrium_flags_non_detailed_balance() {
    let dir = TempDir::new().unwrap();
    let text = CONSTANT_DB.replace("kind = \"constant\"\nvalue = 1.0\n[boundary]", "kind = \"power\"\nf0 = 1.0\ngamma = 1.0\n[boundary]");
    let p = write_scenario(&dir, "skew.toml", &text);
    let o = exec("equilibrium", &p, dir.path(), &[]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("WARNING"));
    let report = json(&dir.path().join("equilibrium.json"));
    assert!(report["spread"].as_f64().unwrap() > 1e-3);
    assert_eq!(report["detailed_balance"], false);
    // The same scenario cannot request entropy analysis.
    let p = write_scenario(&dir, "skew_entropy.toml", &format!("{text}\n[analysis]\nentropy = true\n"));
    assert_eq!(code(&exec("run", &p, &dir.path().join("x"), &[])), 2);
}

#[test]
fn equilibrium_with_zero_boundary_is_invalid() {
    let dir = TempDir::new().unwrap();
    let p = write_scenario(&dir, "zero.toml", &CONSTANT_DB.replace("amplitude = 1.0\ndecay = 1.0", "amplitude = 0.0"));
    let out = dir.path().join("out");
    let o = exec("equilibrium", &p, &out, &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid scenario"));
    assert!(!out.exists());
}

#[test]
fn compare_oracle_pass_fail_and_grid_check() {
    let dir = TempDir::new().unwrap();
    let o = exec("compare-oracle", &bundled("lattice"), &dir.path().join("pass"), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = dir.path().join("pass/compare_oracle.csv");
    let t = column(&table, "t");
    assert_eq!(t, vec![0.0, 0.25, 0.5, 1.0]);
    assert_eq!(column(&table, "m0_rel_err")[0], 0.0);
    assert_eq!(column(&table, "m1_rel_err")[0], 0.0);
    assert!(column(&table, "m0_rel_err").iter().all(|&e| e < 1e-3));

    let coarse = fs::read_to_string(bundled("lattice")).unwrap().replace("dt_max = 1e-3", "dt_max = 0.25\nscheme = \"euler\"");
    let p = write_scenario(&dir, "coarse.toml", &coarse);
    let o = exec("compare-oracle", &p, &dir.path().join("fail"), &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));

    let p = write_scenario(&dir, "unit.toml", CONSTANT_DB);
    assert_eq!(code(&exec("compare-oracle", &p, &dir.path().join("grid"), &[])), 2);
}

#[test]
fn validate_kernel_reports() {
    let dir = TempDir::new().unwrap();
    let o = exec("validate-kernel", &bundled("pure_coag_decay"), &dir.path().join("a"), &[]);
    assert_eq!(code(&o), 0);
    let r = json(&dir.path().join("a/kernel_bounds.json"));
    assert_eq!(r["coagulation"]["max_violation"], 0.0);

    // A table of K = 2 declared to obey K <= 0.25 (x^0 + y^0)(x^0 + y^0) = 1.
    let mut table = String::from("x,y,value\n");
    for x in [0.1, 0.5, 1.0] {
        for y in [0.1, 0.5, 1.0] {
            table.push_str(&format!("{x},{y},2.0\n"));
        }
    }
    fs::write(dir.path().join("k.csv"), table).unwrap();
    let text = CONSTANT_DB.replacen(
        "kind = \"constant\"\nvalue = 1.0",
        "kind = \"table\"\npath = \"k.csv\"\nbounds = { k0 = 0.25, alpha = 0.0, beta = 0.0 }",
        1,
    );
    let p = write_scenario(&dir, "table.toml", &text);
    let o = exec("validate-kernel", &p, &dir.path().join("b"), &[]);
    assert_eq!(code(&o), 1);
    let r = json(&dir.path().join("b/kernel_bounds.json"));
    assert!((r["coagulation"]["max_violation"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let undeclared = text.replace(", bounds = { k0 = 0.25, alpha = 0.0, beta = 0.0 }", "").replace("\nbounds = { k0 = 0.25, alpha = 0.0, beta = 0.0 }", "");
    let p = write_scenario(&dir, "bare.toml", &undeclared);
    assert_eq!(code(&exec("validate-kernel", &p, &dir.path().join("c"), &[])), 2);
}

#[test]
fn batch_runs_in_worker_processes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("batch");
    let (a, b) = (bundled("lattice"), bundled("detailed_balance_relax"));
    let o = Command::new(env!("CARGO_BIN_EXE_coagfrag"))
        .args(["run", "--batch", "--scenario", a.to_str().unwrap(), b.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("COAGFRAG_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("lattice/diagnostics.csv").exists());
    assert!(out.join("detailed_balance_relax/manifest.json").exists());

    let single = dir.path().join("single");
    assert_eq!(code(&exec("run", &b, &single, &[])), 0);
    assert_eq!(
        fs::read(single.join("diagnostics.csv")).unwrap(),
        fs::read(out.join("detailed_balance_relax/diagnostics.csv")).unwrap()
    );

    let bad = write_scenario(&dir, "bad.toml", "nonsense");
    let o = coagfrag(&["run", "--batch", "--scenario", a.to_str().unwrap(), bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = coagfrag(&["run", "--scenario", a.to_str().unwrap(), bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
