use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mdbias::diagnostics::read_trace;
use serde_json::Value;

fn mdbias(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdbias"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn single_step_run_records_two_rows() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.toml", "run.steps = 1\n");
    let o = mdbias(tmp.path(), &["run", "--config", "c.toml", "--out", "a"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_trace(fs::read(tmp.path().join("a/trace.csv")).unwrap().as_slice()).unwrap();
    assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), [0, 1]);
    let s = json(&tmp.path().join("a/summary.json"));
    assert_eq!(s["final_t"], 1);
    assert!(s["final_bregman_gap"].is_number());
    assert!(s["norm_growth"].is_null());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.toml", "[run]\np = 1.5\nsteps = 20000\n");
    for dir in ["a", "b", "a"] {
        let o = mdbias(tmp.path(), &["run", "--config", "c.toml", "--seed", "3", "--out", dir]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trace.csv", "summary.json"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let s = json(&tmp.path().join("a/summary.json"));
    assert_eq!(s["seed"], 3);
    assert!(s["rate_fit"].is_object());
    assert!(s["norm_growth"]["fit"]["r_squared"].is_number());
}

#[test]
fn planar_run_passes_its_bound_checks() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.toml", "[run]\np = 2.0\nsteps = 200000\nrecord_every = 100\n");
    let o = mdbias(tmp.path(), &["run", "--config", "c.toml", "--out", "a"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&tmp.path().join("a/summary.json"));
    assert_eq!(s["bounds_ok"], true, "{s}");
}

#[test]
fn record_every_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.toml", "run.steps = 10\n");
    let o = mdbias(tmp.path(), &["run", "--config", "c.toml", "--record-every", "4", "--out", "a"]);
    assert_eq!(code(&o), 0);
    let rows = read_trace(fs::read(tmp.path().join("a/trace.csv")).unwrap().as_slice()).unwrap();
    assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), [0, 4, 8, 10]);
}

#[test]
fn invalid_configs_exit_1_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    for (i, text) in ["run.p = 1.0\n", "run.stepz = 3\n", "run.p = \"two\"\n", "run.eta = -1.0\n"].iter().enumerate() {
        let name = format!("c{i}.toml");
        write(tmp.path(), &name, text);
        let o = mdbias(tmp.path(), &["run", "--config", &name, "--out", "never"]);
        assert_eq!(code(&o), 1, "{text:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!tmp.path().join("never").exists());
    assert_eq!(code(&mdbias(tmp.path(), &["run"])), 1);
    assert_eq!(code(&mdbias(tmp.path(), &["no-such-command"])), 1);
    assert_eq!(code(&mdbias(tmp.path(), &["run", "--config", "missing.toml"])), 1);
}

#[test]
fn unknown_key_error_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.toml", "[run]\np = 2.0\nstep = 3\n");
    let o = mdbias(tmp.path(), &["run", "--config", "c.toml"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("step") && err.contains("line 3"), "{err}");
}

#[test]
fn non_separable_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", "y,x1,x2\n1,1,0\n-1,1,0\n");
    write(tmp.path(), "c.toml", "dataset.kind = \"custom_file\"\ndataset.path = \"d.csv\"\nrun.steps = 10\n");
    for cmd in ["maxmargin", "run", "path"] {
        let o = mdbias(tmp.path(), &[cmd, "--config", "c.toml"]);
        assert_eq!(code(&o), 3, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn maxmargin_single_point_geometry() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", "y,x1,x2\n1,0.5,1.5\n");
    let mut dirs = Vec::new();
    for p in ["1.1", "2.0", "10.0"] {
        let name = format!("p{p}.toml");
        write(tmp.path(), &name, &format!("dataset.kind = \"custom_file\"\ndataset.path = \"d.csv\"\nrun.p = {p}\n"));
        let out = format!("m{p}");
        let o = mdbias(tmp.path(), &["maxmargin", "--config", &name, "--out", &out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        dirs.push(json(&tmp.path().join(out).join("maxmargin.json")));
    }
    let dir = |v: &Value| -> (f64, f64) { (v["direction"][0].as_f64().unwrap(), v["direction"][1].as_f64().unwrap()) };
    let (a, b) = dir(&dirs[0]);
    assert!(b.abs() / (a.abs() + b.abs()) >= 0.99);
    let (a, b) = dir(&dirs[1]);
    assert!((b / a - 3.0).abs() < 1e-6);
    let (a, b) = dir(&dirs[2]);
    assert!((b / a - 3f64.powf(1.0 / 9.0)).abs() < 1e-4);
    for v in &dirs {
        assert!(v["grid"]["margin_diff"].as_f64().unwrap() < 1e-6);
    }
}

#[test]
fn sweep_writes_cells_in_axis_order() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "c.toml",
        "run.steps = 2000\nrun.record_every = 10\n[sweep]\naxis = \"beta\"\nvalues = [3, 1.5, 2]\n",
    );
    let o = mdbias(tmp.path(), &["sweep", "--config", "c.toml", "--workers", "2", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&tmp.path().join("s/sweep.json"));
    let values: Vec<&str> = r["cells"].as_array().unwrap().iter().map(|c| c["value"].as_str().unwrap()).collect();
    assert_eq!(values, ["3", "1.5", "2"]);
    for v in values {
        let rows = read_trace(fs::read(tmp.path().join(format!("s/beta_{v}/trace.csv"))).unwrap().as_slice()).unwrap();
        assert_eq!(rows.len(), 201);
    }
    let table = fs::read_to_string(tmp.path().join("s/norm_table.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "classifier,l1.1,l2,l3,l10");
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn sweep_over_p_flags_the_diagonal() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "c.toml",
        "run.steps = 50000\nrun.record_every = 1000\nreport.norms = [2, 3, \"inf\"]\n[sweep]\naxis = \"p\"\nvalues = [2, 3]\n",
    );
    let o = mdbias(tmp.path(), &["sweep", "--config", "c.toml", "--workers", "1", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&tmp.path().join("s/sweep.json"));
    let flagged: Vec<&str> = r["diagonal_minimal"].as_array().unwrap().iter().map(|x| x[0].as_str().unwrap()).collect();
    assert_eq!(flagged, ["2", "3"]);
}

#[test]
fn sweep_cell_failure_leaves_siblings() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "c.toml",
        "target.kind = \"none\"\n[run]\nloss = \"square\"\neta = 10.0\nsteps = 50\n\
         [sweep]\naxis = \"step_kind\"\nvalues = [\"fixed\", \"normalized\"]\n",
    );
    let o = mdbias(tmp.path(), &["sweep", "--config", "c.toml", "--out", "s"]);
    assert_eq!(code(&o), 2);
    let r = json(&tmp.path().join("s/sweep.json"));
    assert!(r["cells"][0]["error"].as_str().unwrap().contains("loss increased"));
    assert!(r["cells"][1]["summary"].is_object());
    assert!(tmp.path().join("s/step_kind_normalized/trace.csv").exists());
}

#[test]
fn empty_sweep_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.toml", "[sweep]\naxis = \"p\"\nvalues = []\n");
    assert_eq!(code(&mdbias(tmp.path(), &["sweep", "--config", "c.toml"])), 1);
    write(tmp.path(), "d.toml", "run.steps = 10\n");
    assert_eq!(code(&mdbias(tmp.path(), &["sweep", "--config", "d.toml"])), 1);
}

#[test]
fn path_rows_follow_budgets() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.toml", "run.p = 3.0\npath.budgets = [1, 4, 16]\n");
    let o = mdbias(tmp.path(), &["path", "--config", "c.toml", "--out", "p"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(tmp.path().join("p/path.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "budget,loss,fw_gap,iterations,bregman_gap,w1,w2");
    assert_eq!(lines.len(), 4);
    let losses: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn verify_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mdbias(tmp.path(), &["verify", "--out", "v"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r = json(&tmp.path().join("v/verify.json"));
    let checks = r["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 10);
    assert!(checks.iter().all(|c| c["max_error"].is_number() && c["failures"] == 0));
    assert_eq!(code(&mdbias(tmp.path(), &["verify", "--mutant"])), 2);
    let help = mdbias(tmp.path(), &["verify", "--help"]);
    assert_eq!(code(&help), 0);
    assert!(!String::from_utf8_lossy(&help.stdout).contains("mutant"));
}
