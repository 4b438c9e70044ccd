use std::fs;

use fws_core::harness::{run_pipeline, RunConfig, Stage};
use fws_core::FwsError;

fn tiny() -> RunConfig {
    RunConfig::from_toml(
        r#"
        output_dir = "run"
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
        "#,
    )
    .unwrap()
}

#[test]
fn stages_resume_across_invocations_and_guard_fingerprints() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny();
    run_pipeline(&cfg, &[Stage::Train, Stage::Synth], root).unwrap();

    // Evaluation settings do not invalidate the checkpoint.
    let mut other_grid = cfg.clone();
    other_grid.eval.shots = vec![1];
    let paths = run_pipeline(&other_grid, &[Stage::Eval, Stage::Report], root).unwrap();
    let lines: Vec<serde_json::Value> =
        fs::read_to_string(paths.metrics()).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    for l in &lines {
        for k in ["learner", "dataset", "shots", "technique", "density", "seed", "query_id", "iou_od", "iou_oc", "config_fingerprint"] {
            assert!(l.get(k).is_some(), "metric line lacks {k}: {l}");
        }
        assert_eq!(l["shots"], 1);
        assert_eq!(l["config_fingerprint"], other_grid.eval_fingerprint());
    }

    // Metrics from one grid cannot be reported under another.
    let err = run_pipeline(&cfg, &[Stage::Report], root).unwrap_err();
    assert!(matches!(err, FwsError::Config(ref m) if m.contains("metrics were produced")), "{err}");

    // A checkpoint trained under other settings is rejected.
    let mut retrained = cfg.clone();
    retrained.train.epochs = 2;
    let err = run_pipeline(&retrained, &[Stage::Eval], root).unwrap_err();
    assert!(matches!(err, FwsError::Config(_)), "{err}");
}

#[test]
fn preflight_rejects_missing_inputs_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    for stages in [&[Stage::Train][..], &[Stage::Eval], &[Stage::Report]] {
        let err = run_pipeline(&cfg, stages, dir.path()).unwrap_err();
        assert!(matches!(err, FwsError::Config(_)), "{err}");
    }
    assert!(!dir.path().join("run").exists());
}
