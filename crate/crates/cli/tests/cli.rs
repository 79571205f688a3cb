use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn satslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_satslab"))
        .args(args)
        .env("SATSLAB_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const SMALL_SPEC: &str = r#"{"train_size": 40, "eval_size": 10, "seed": 3}"#;
const TINY_CONFIG: &str = r#"{
  "name": "tiny",
  "plan": {"m": 2, "n": 2, "stage_count": 3, "class_order": [1, 2, 3, 4, 5, 6],
           "epochs_initial": 1, "epochs_incremental": 1}
}"#;

fn small_dataset(root: &Path) -> PathBuf {
    let spec = write(root, "spec.json", SMALL_SPEC);
    let data = root.join("data");
    let o = satslab(&["generate", "--spec", p(&spec), "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

#[test]
fn generate_default_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let o = satslab(&["generate", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["class_count"], 6);
    assert_eq!(m["train"].as_array().unwrap().len(), 400);
    assert_eq!(m["eval"].as_array().unwrap().len(), 100);
}

#[test]
fn generate_is_reproducible_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.json", SMALL_SPEC);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&satslab(&["generate", "--spec", p(&spec), "--out", p(&a)])), 0);
    assert_eq!(code(&satslab(&["generate", "--spec", p(&spec), "--out", p(&b)])), 0);
    let ma = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read_to_string(b.join("manifest.json")).unwrap());

    let again = satslab(&["generate", "--spec", p(&spec), "--out", p(&a)]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));
    assert_eq!(code(&satslab(&["generate", "--spec", p(&spec), "--out", p(&a), "--force"])), 0);
}

#[test]
fn bad_spec_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.json", r#"{"train_size": 40, "class_count": "six"}"#);
    let o = satslab(&["generate", "--spec", p(&spec), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("class_count"), "{}", stderr(&o));
    let spec = write(dir.path(), "spec2.json", r#"{"colour": 1}"#);
    let o = satslab(&["generate", "--spec", p(&spec), "--out", p(&dir.path().join("y"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn run_two_seeds_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = write(dir.path(), "cfg.json", TINY_CONFIG);
    let runs = dir.path().join("runs");
    let args = ["run", "--config", p(&cfg), "--data", p(&data), "--seeds", "1,2", "--out", p(&runs)];
    let o = satslab(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run_dirs: Vec<PathBuf> = fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(run_dirs.len(), 2);
    for d in &run_dirs {
        let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["stages"].as_array().unwrap().len(), 3);
        assert!(d.join("config.json").exists());
        assert!(d.join("stage-2/metrics.csv").exists());
    }

    let again = satslab(&args);
    assert_eq!(code(&again), 1, "{}", stderr(&again));

    let csv = dir.path().join("plot.csv");
    let o = satslab(&["plot-data", "--runs", p(&runs), "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,stage,mean,stddev");
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().skip(1).all(|l| l.starts_with("tiny,")));

    let o = satslab(&["plot-data", "--runs", p(&run_dirs[0]), "--out", p(&csv)]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0.000000")), "{text}");

    // a second method with a different stage count is fine; a run of the
    // same method with fewer stages is not
    let bad = dir.path().join("bad");
    fs::create_dir(&bad).unwrap();
    let mut s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dirs[0].join("summary.json")).unwrap()).unwrap();
    s["stages"].as_array_mut().unwrap().pop();
    s["seed"] = 9.into();
    fs::write(bad.join("summary.json"), s.to_string()).unwrap();
    let o = satslab(&["plot-data", "--runs", p(&runs), p(&bad), "--out", p(&csv)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    s["name"] = "other".into();
    fs::write(bad.join("summary.json"), s.to_string()).unwrap();
    let o = satslab(&["plot-data", "--runs", p(&runs), p(&bad), "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 3 + 2);
}

#[test]
fn plot_of_nothing_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = satslab(&["plot-data", "--runs", p(dir.path()), "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_path_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = satslab(&[
        "run",
        "--preset",
        "synth-4-2",
        "--data",
        p(&dir.path().join("nope")),
        "--out",
        p(&dir.path().join("runs")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let o = satslab(&["ablate", "--preset", "synth-2-2", "--data", p(&data), "--out", "x", "--axis", "heads"]);
    assert_eq!(code(&o), 1);
    let o = satslab(&["run", "--preset", "voc-15-1", "--data", p(&data), "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown preset"));
    let o = satslab(&["run", "--data", p(&data), "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&satslab(&["frobnicate"])), 1);
    assert_eq!(code(&satslab(&["--help"])), 0);
}

#[test]
fn diverging_run_aborts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = write(
        dir.path(),
        "cfg.json",
        r#"{"name": "hot", "plan": {"m": 2, "n": 2, "stage_count": 3, "class_order": [1, 2, 3, 4, 5, 6],
            "epochs_initial": 2, "epochs_incremental": 1, "lr_initial": 1e12}}"#,
    );
    let runs = dir.path().join("runs");
    let o = satslab(&["run", "--config", p(&cfg), "--data", p(&data), "--out", p(&runs)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let run = fs::read_dir(&runs).unwrap().map(|e| e.unwrap().path()).find(|p| p.is_dir()).unwrap();
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["stage"], 0);
}

#[test]
fn ablate_components_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = write(dir.path(), "cfg.json", TINY_CONFIG);
    let out = dir.path().join("abl");
    let o = satslab(&[
        "ablate", "--config", p(&cfg), "--data", p(&data), "--seeds", "0", "--out", p(&out), "--axis", "components",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation-components.csv")).unwrap();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["full", "no-pl", "no-la", "no-ld"]);
    let dirs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("run-")).count();
    assert_eq!(dirs, 4);
}
