use std::fs;

use coagfrag::io::{read_state_csv, write_state_csv};
use coagfrag::operators::RhsTables;
use coagfrag::scenario::Scenario;
use coagfrag::solver::run;
use tempfile::TempDir;

const BASE: &str = r#"
name = "files"
[coagulation]
kind = "additive"
scale = 1.0
[fragmentation]
kind = "constant"
value = 0.5
[boundary]
amplitude = 1.0
decay = 2.0
modulation = { kind = "sampled", path = "mod.csv" }
[initial]
kind = "density"
amplitude = 1.0
decay = 1.0
[grid]
kind = "geometric"
n = 16
ratio = 1.4
[solver]
t_final = 0.5
snapshot_interval = 0.25
"#;

#[test]
fn restart_from_written_state() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("mod.csv"), "t,factor\n0,1\n1,0.5\n").unwrap();
    let path = dir.path().join("a.toml");
    fs::write(&path, BASE).unwrap();
    let sc = Scenario::from_path(&path).unwrap();
    let built = sc.build().unwrap();
    let tables = RhsTables::new(&built.model, built.grid.clone(), built.solver.quad_n).unwrap();
    let traj = run(&built.initial, &tables, &built.solver).unwrap();
    let last = traj.states.last().unwrap();

    let mut buf = Vec::new();
    write_state_csv(&mut buf, last).unwrap();
    fs::create_dir(dir.path().join("states")).unwrap();
    fs::write(dir.path().join("states/end.csv"), &buf).unwrap();
    assert_eq!(&read_state_csv(&buf[..], built.grid.clone()).unwrap(), last);

    let restart = BASE.replace(
        "kind = \"density\"\namplitude = 1.0\ndecay = 1.0",
        "kind = \"csv\"\npath = \"states/end.csv\"",
    );
    let path = dir.path().join("b.toml");
    fs::write(&path, restart).unwrap();
    let sc = Scenario::from_path(&path).unwrap();
    assert_eq!(&sc.build().unwrap().initial, last);
}

#[test]
fn missing_referenced_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.toml");
    fs::write(&path, BASE).unwrap();
    let err = Scenario::from_path(&path).unwrap().build().unwrap_err();
    assert!(err.is_config(), "{err}");
}

#[test]
fn resolved_scenario_reloads_identically() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("a.toml");
    fs::write(&path, BASE).unwrap();
    let sc = Scenario::from_path(&path).unwrap();
    let text = sc.to_toml().unwrap();
    let again = Scenario::parse(&text, std::path::Path::new("/elsewhere")).unwrap();
    assert_eq!(again, sc);
}
