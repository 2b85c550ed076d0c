use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tyrion::data::png_io;
use tyrion::raster::Raster;

fn tyrion(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tyrion")).current_dir(cwd).args(args).output().expect("spawn tyrion")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, glaciers: &str, scenes: &str) -> Output {
    let o = tyrion(dir, &["--toy", "--out", "run", "synth", "--glaciers", glaciers, "--scenes", scenes, "--size", "80"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    o
}

fn finetune(dir: &Path) -> Output {
    tyrion(dir, &["--toy", "--out", "run", "finetune", "--setup", "1", "--data", "run/data", "--steps", "2", "--batch-size", "2"])
}

fn stems(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .map(|p| p.file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_requested_counts() {
    let t = tempfile::tempdir().unwrap();
    let o = synth(t.path(), "2", "3");
    assert!(stdout(&o).contains("scenes:         6"), "{}", stdout(&o));
    for g in ["glacier_00", "glacier_01"] {
        let root = t.path().join("run/data").join(g);
        assert_eq!(stems(&root.join("sar")).len(), 3);
        assert_eq!(stems(&root.join("sar")), stems(&root.join("zones")));
        assert_eq!(stems(&root.join("sar")), stems(&root.join("fronts")));
    }
    assert!(!t.path().join("run/data/glacier_02").exists());
}

#[test]
fn missing_config_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    let o = tyrion(t.path(), &["--config", "absent.toml", "summary"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("absent.toml"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.toml"), "seed = 1\nbogus = 2\n").unwrap();
    let o = tyrion(t.path(), &["--config", "c.toml", "summary"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn setup_two_with_objective_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "1", "2");
    let o = tyrion(t.path(), &["--toy", "--out", "run", "finetune", "--setup", "2", "--objective", "optsimmim", "--data", "run/data"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let t = tempfile::tempdir().unwrap();
    let o = tyrion(t.path(), &["--toy", "--out", "run", "finetune", "--setup", "1", "--data", "nowhere", "--steps", "1"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn summary_round_trips_through_a_config_file() {
    let t = tempfile::tempdir().unwrap();
    let a = tyrion(t.path(), &["--toy", "--seed", "42", "summary"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let text = stdout(&a);
    let toml: String = text.lines().filter(|l| !l.starts_with("# parameters")).map(|l| format!("{l}\n")).collect();
    fs::write(t.path().join("c.toml"), toml).unwrap();
    let b = tyrion(t.path(), &["--config", "c.toml", "summary"]);
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    assert_eq!(stdout(&b), text);
}

#[test]
fn eval_of_labels_against_themselves_is_zero() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "1", "2");
    let o = tyrion(t.path(), &["eval", "--pred", "run/data", "--gt", "run/data", "--baseline", "run/data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("d=0"), "{}", stdout(&o));
}

#[test]
fn eval_with_empty_predictions_exits_five() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "1", "2");
    let fronts = t.path().join("run/data/glacier_00/fronts");
    let pred = t.path().join("pred/glacier_00/fronts");
    fs::create_dir_all(&pred).unwrap();
    for s in stems(&fronts) {
        let gt = png_io::read_gray(&fronts.join(format!("{s}.png"))).unwrap();
        let (h, w) = gt.dims();
        png_io::write_u8(&pred.join(format!("{s}.png")), &Raster::filled(h, w, 0u8)).unwrap();
    }
    let o = tyrion(t.path(), &["eval", "--pred", "pred", "--gt", "run/data"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(stderr(&o).contains("2 image(s) without a predicted front"));
}

#[test]
fn eval_with_missing_predictions_is_a_data_error() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "1", "2");
    fs::create_dir_all(t.path().join("pred")).unwrap();
    let o = tyrion(t.path(), &["eval", "--pred", "pred", "--gt", "run/data"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn logs_are_append_only_and_inference_needs_a_bbox() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "1", "3");
    let first = finetune(t.path());
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let log = t.path().join("run/finetune/metrics.log");
    let before = fs::read_to_string(&log).unwrap();
    assert!(before.starts_with("epoch=0 split=init source=scratch"), "{before}");
    let second = finetune(t.path());
    assert_eq!(code(&second), 0, "{}", stderr(&second));
    let after = fs::read_to_string(&log).unwrap();
    assert!(after.len() > before.len() && after.starts_with(&before));
    assert!(fs::read_to_string(t.path().join("run/finetune/timing.log")).unwrap().contains("seconds="));

    let infer = tyrion(t.path(), &["--toy", "--out", "run", "infer", "--scenes", "run/data"]);
    assert_eq!(code(&infer), 0, "{}", stderr(&infer));
    let manifest = fs::read_to_string(t.path().join("run/infer/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("glacier=")).count(), 3, "{manifest}");
    let unc = t.path().join("run/infer/glacier_00/uncertainty");
    assert_eq!(stems(&unc).len(), 3 * 4);

    let sar = t.path().join("run/data/glacier_00/sar");
    let meta = fs::read_dir(&sar).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|e| e == "meta")).unwrap();
    let text: String = fs::read_to_string(&meta).unwrap().lines().filter(|l| !l.starts_with("bbox")).map(|l| format!("{l}\n")).collect();
    fs::write(&meta, text).unwrap();
    let o = tyrion(t.path(), &["--toy", "--out", "run", "infer", "--scenes", "run/data", "--dir", "again"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("bbox"), "{}", stderr(&o));
}
