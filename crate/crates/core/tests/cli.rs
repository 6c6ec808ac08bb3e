//! The `smallinit` binary: commands, overrides and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smallinit"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const SMALL_EFFECTIVE: &str = "scenario = \"effective_sim\"\nseeds = [3, 4]\n\n[model]\nd_m = 4\nepsilon = 0.5\n";

#[test]
fn describe_prints_cards() {
    let o = bin().args(["describe", "kq_collapse"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("Thm. 3") && stdout(&o).contains("Eq. (13)"));

    let o = bin().args(["describe", "effective_sim"]).output().unwrap();
    assert!(stdout(&o).contains("rtol") && stdout(&o).contains("max_norm"));
}

#[test]
fn describe_unknown_lists_scenarios_and_exits_1() {
    let o = bin().args(["describe", "warp_drive"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    for name in ["effective_sim", "blowup_sweep", "condensation_study", "kq_collapse", "train_synthetic", "taylor_check", "validate"] {
        assert!(stderr(&o).contains(name), "{name}");
    }
}

#[test]
fn config_errors_exit_1_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "scenario = \"effective_sim\"\nbogus = 1\n");
    let o = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2") && stderr(&o).contains("bogus"), "{}", stderr(&o));

    let path = write_config(dir.path(), "scenario = \"kq_collapse\"\n");
    let o = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[kq]"));

    let o = bin().args(["run", "/nonexistent/run.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let o = bin().arg("run").arg(config("effective_sim.toml")).args(["--threads", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let o = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unwritable_output_is_an_infrastructure_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let path = write_config(dir.path(), SMALL_EFFECTIVE);
    let o = bin().arg("run").arg(&path).arg("--output-dir").arg(blocker.join("out")).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn repeated_runs_are_byte_identical_and_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), SMALL_EFFECTIVE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = bin().arg("run").arg(&path).arg("--output-dir").arg(&a).args(["--threads", "1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = bin().arg("run").arg(&path).arg("--output-dir").arg(&b).args(["--threads", "2"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    for f in ["seed_3/trajectory.csv", "seed_4/trajectory.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let c = dir.path().join("c");
    let o = bin().arg("run").arg(&path).arg("--output-dir").arg(&c).args(["--seeds", "7,8,9"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    for s in [7, 8, 9] {
        assert!(c.join(format!("seed_{s}/trajectory.csv")).exists());
    }
    assert!(!c.join("seed_3").exists());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(c.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seeds"], serde_json::json!([7, 8, 9]));
}

#[test]
fn shipped_configs_parse() {
    for entry in std::fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")).unwrap() {
        let path = entry.unwrap().path();
        smallinit::runner::config::ExperimentConfig::from_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
