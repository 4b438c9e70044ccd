use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
output_dir = "tiny"
[data.load]
size = [32, 32]
[data.synth]
train = 10
train_support = 6
test = 6
test_support = 3
[data.synth.spec]
image_size = 32
[net]
base_width = 4
embed_dim = 4
levels = 2
norm_groups = 1
[train]
epochs = 1
batch = 2
[omni]
shots = [1, 2]
[eval]
shots = [1, 2]
"#;

fn fws(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fws"))
        .args(args)
        .env("FWS_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fingerprint_line(o: &Output) -> String {
    stdout(o).lines().next().unwrap().to_string()
}

#[test]
fn config_prints_toml_and_fingerprint_that_tracks_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let a = fws(dir.path(), &["config"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(fingerprint_line(&a).starts_with("# config_fingerprint="));
    assert!(stdout(&a).contains("[train]"));
    let b = fws(dir.path(), &["config", "--set", "train.epochs=7"]);
    assert!(b.status.success(), "{}", stderr(&b));
    assert_ne!(fingerprint_line(&a), fingerprint_line(&b));
    assert!(stdout(&b).contains("epochs = 7"));
}

#[test]
fn unknown_and_invalid_keys_fail_with_the_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let o = fws(dir.path(), &["config", "--set", "train.nonsense=1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nonsense"), "{}", stderr(&o));
    let o = fws(dir.path(), &["config", "--set", "train.batch=0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train.batch"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_fails_before_writing_anything() {
    let dir = tempfile::tempdir().unwrap();
    let o = fws(dir.path(), &["train", "--set", "output_dir=\"empty\""]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does not exist"), "{}", stderr(&o));
    assert!(!dir.path().join("empty").exists());
}

#[test]
fn staged_run_then_sparsify_a_generated_mask() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();

    let o = fws(dir.path(), &["run", "-c", c, "--stages", "synth,transform,train,eval,report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("tiny");
    assert_eq!(stdout(&o).trim(), out.display().to_string());
    for f in ["config.toml", "schedule.json", "eval_grid.json", "train_summary.json", "metrics.jsonl", "summary_best.csv", "iou_by_shots.svg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let fp = fingerprint_line(&fws(dir.path(), &["config", "-c", c]));
    let csv = fs::read_to_string(out.join("summary_best.csv")).unwrap();
    assert!(fp.starts_with("# config_fingerprint="));
    assert!(csv.starts_with("# config_fingerprint="));

    let mask = out.join("data/test/masks/synth_00000.png");
    let sparse = |name: &str| {
        let p = dir.path().join(name);
        let o = fws(
            dir.path(),
            &["sparsify", "--input", mask.to_str().unwrap(), "--output", p.to_str().unwrap(), "--technique", "points", "--density", "10", "--seed", "3"],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(p).unwrap()
    };
    let a = sparse("a.png");
    assert_eq!(a, sparse("b.png"));
    assert_eq!(&a[1..4], b"PNG");
}
