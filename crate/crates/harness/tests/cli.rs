use std::path::Path;
use std::process::{Command, Output};

fn flowkv(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowkv"));
    cmd.args(args).env_remove("FLOWKV_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    flowkv(args, &[]).status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn profile_to_stdout_and_trace_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.fkv");
    let first = flowkv(&["profile", "--emit-trace", path(&trace)], &[]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let stdout = String::from_utf8(first.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1 + 6);
    assert!(stdout.starts_with("experiment,config_id,scope,layer"));

    let again = flowkv(&["profile", "--trace", path(&trace)], &[]);
    assert!(again.status.success());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), stdout);
}

#[test]
fn run_writes_csv_with_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let args = ["run", "--strategy", "h2o", "--budget", "0.35", "--steps", "3", "--out", path(&out)];
    let o = flowkv(&args, &[("FLOWKV_THREADS", "2")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7);
    assert!(csv.lines().last().unwrap().starts_with("run,h2o,aggregate,,h2o,0.35,"));
}

#[test]
fn plots_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let plots = dir.path().join("plots");
    let out = dir.path().join("b.csv");
    let args = ["budget-sweep", "--steps", "2", "--budgets", "0.2,0.5", "--strategies", "flowmm,h2o", "--plots", path(&plots), "--out", path(&out)];
    assert_eq!(code(&args), 0);
    let svg = std::fs::read_to_string(plots.join("budget_sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&["run", "--budget", "0"]), 2);
    assert_eq!(code(&["run", "--strategy", "d2o"]), 2);
    assert_eq!(code(&["run", "--steps", "0"]), 2);
    assert_eq!(code(&["theta-sweep", "--thetas", "0.2,1.5"]), 2);
    assert_eq!(code(&["nonsense"]), 2);
    assert_eq!(flowkv(&["profile"], &[("FLOWKV_THREADS", "zero")]).status.code(), Some(2));
}

#[test]
fn bad_traces_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("g.fkv");
    assert_eq!(code(&["profile", "--text-only", "12", "--emit-trace", path(&good)]), 0);
    let bytes = std::fs::read(&good).unwrap();

    let truncated = dir.path().join("cut.fkv");
    std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let o = flowkv(&["profile", "--trace", path(&truncated)], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("parse error at byte"));

    let mut versioned = bytes.clone();
    versioned[4] = 9;
    let wrong = dir.path().join("v.fkv");
    std::fs::write(&wrong, versioned).unwrap();
    let o = flowkv(&["profile", "--trace", path(&wrong)], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema version 9"));

    assert_eq!(code(&["profile", "--trace", path(&dir.path().join("missing.fkv"))]), 3);
}

#[test]
fn text_only_trace_has_zero_rho() {
    let o = flowkv(&["profile", "--text-only", "20"], &[]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    let rho_col = stdout.lines().next().unwrap().split(',').position(|c| c == "rho").unwrap();
    for line in stdout.lines().skip(1) {
        assert_eq!(line.split(',').nth(rho_col), Some("0.0"));
    }
}
