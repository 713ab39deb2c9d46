use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavefield-doe")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        format!(
            r#"{{"scenario": "preset:hypocenter1", "grid": {{"count": 41, "f_max": 2.0}},
               "selection": {{"p": 3}}, "seeds": {{"truth": 1, "noise": 2, "baseline": 3}},
               "baseline_count": 4 {extra}}}"#
        ),
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn select_prints_ordered_sites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("runs");
    let o = cli(&["select", "--config", &cfg, "--out", out.to_str().unwrap(), "--sites", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 5);
    let run_dir = text.lines().find_map(|l| l.strip_prefix("run_dir ")).unwrap();
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(run_dir).join("selection.json")).unwrap()).unwrap();
    assert_eq!(doc["p"], 5);
}

#[test]
fn twin_and_baseline_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("runs");
    let o = cli(&["twin", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed-truth", "7", "--band", "0.1:0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("final_error"));
    let o = cli(&["baseline", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("subsets 4"));
    // Different seeds hash to different run directories.
    assert_eq!(fs::read_dir(&out).unwrap().count(), 2);
}

#[test]
fn sensitivity_prints_summed_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = cli(&["sensitivity", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["V_P1", "V_S3", "h_2", "S_UD"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Config error.
    let bad = write_config(dir.path(), r#", "noise_variance": -1"#);
    assert_eq!(cli(&["twin", "--config", &bad]).status.code(), Some(2));
    assert_eq!(cli(&["select", "--config", &bad, "--band", "nonsense"]).status.code(), Some(2));
    assert_eq!(cli(&["bogus"]).status.code(), Some(2));
    // Missing file.
    let missing = dir.path().join("nope.json");
    assert_eq!(cli(&["twin", "--config", missing.to_str().unwrap()]).status.code(), Some(4));
    // Output root that is a regular file.
    let good = write_config(dir.path(), "");
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = cli(&["select", "--config", &good, "--out", blocker.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    // Numeric failure: exhaustive search past the combinatorial guard.
    let brute = write_config(dir.path(), "");
    let text = fs::read_to_string(&brute).unwrap().replace(r#""p": 3"#, r#""p": 3, "method": "brute""#);
    fs::write(&brute, text).unwrap();
    let o = cli(&["select", "--config", &brute, "--sites", "25", "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("selection"));
}
