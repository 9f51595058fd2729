use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_moonshot-sim"));
    c.env_remove("MOONSHOT_SIM_OUT");
    c
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_is_safe_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--seed", "3", "--max-steps", "400", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("seed=3 steps=400 "));
    let trace = dir.path().join("trace-3.txt");
    assert!(trace.exists());
    assert!(dir.path().join("report-3.txt").exists());

    let r = bin().arg("replay").arg(&trace).output().unwrap();
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(stdout(&r).lines().next(), stdout(&o).lines().next());
}

#[test]
fn out_dir_defaults_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env("MOONSHOT_SIM_OUT", dir.path())
        .args(["run", "--seed", "1", "--max-steps", "50"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("trace-1.txt").exists());
}

#[test]
fn mutated_config_reports_violation() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("run")
        .arg("--config")
        .arg(configs().join("bad.cfg"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(stdout(&o).contains("VIOLATION kind="));

    // The recorded violation reappears on replay.
    let r = bin().arg("replay").arg(dir.path().join("trace-0.txt")).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
    assert!(stdout(&r).contains("VIOLATION kind="));
}

#[test]
fn tampered_trace_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    bin()
        .args(["run", "--seed", "5", "--max-steps", "100", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let p = dir.path().join("trace-5.txt");
    let text = std::fs::read_to_string(&p).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let i = lines.iter().position(|l| l.starts_with("step=10 ")).unwrap();
    let (head, _) = lines[i].split_once(" | outbox=").unwrap();
    lines[i] = format!("{head} | outbox=[]");
    std::fs::write(&p, lines.join("\n")).unwrap();
    let r = bin().arg("replay").arg(&p).output().unwrap();
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("mismatch at step 10"));
}

#[test]
fn campaign_summary_and_violating_traces() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["campaign", "--seeds", "0..4", "--mutate", "NoLockCheck", "--adversary", "Equivocator"])
        .arg("--config")
        .arg(configs().join("base.cfg"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("campaign runs=4 "));
    assert!(stdout(&o).contains("first_violation seed="));
    assert!(dir.path().join("campaign.txt").exists());
    assert!(std::fs::read_dir(dir.path()).unwrap().count() >= 2);

    let safe = bin()
        .args(["campaign", "--seeds", "0..4", "--jobs", "2", "--adversary", "generated", "--max-steps", "300"])
        .output()
        .unwrap();
    assert_eq!(safe.status.code(), Some(0));
    assert!(stdout(&safe).contains(" violations=0 "));
}

#[test]
fn explore_scripted_vocabulary() {
    let o = bin()
        .arg("explore")
        .arg("--config")
        .arg(configs().join("explore.cfg"))
        .args(["--depth", "5"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("complete=true violations=0"));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.cfg");
    std::fs::write(&p, "f = 1\ncolour = blue\n").unwrap();
    let o = bin().arg("run").arg("--config").arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    assert_eq!(bin().args(["run", "--bogus"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["campaign", "--seeds", "9..2"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["run", "--mutate", "Nope"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn mutants_all_killed() {
    let o = bin().args(["mutants", "--seeds", "0..200"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("mutants killed=6 survived=0"));
}

#[test]
fn mutants_survive_with_no_budget() {
    let o = bin().args(["mutants", "--seeds", "0..0", "--depth", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("survived=6"));
}
