//! Stage execution. Stages run sequentially in a fixed order; each reads
//! the artifacts of earlier stages from the output directory.

use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::profile::{profile_inference, profile_prediction, summarize_timing, ProfileRequest, TimingRecord};
use super::report::{plot_inference_time, plot_iou_by_shots, write_metric_summaries, write_timing_summary};
use crate::data::{generate_synthetic, load_dataset, save_dataset, write_mask, SynthSpec};
use crate::episodes::{build_omni_schedule, enumerate_eval_grid, DatasetBundle, EpisodeSpec, OmniSchedule};
use crate::error::{FwsError, Result};
use crate::learners::{evaluate_cells, meta_train, sl_train, EpochLog, Learner, TrainSource, Validation};
use crate::metrics::{read_jsonl, write_jsonl, MetricRecord};
use crate::net::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamSet, UNet};
use crate::sparsify::{sparsify, SparsifyParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Transform,
    Train,
    Eval,
    Profile,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Synth, Stage::Transform, Stage::Train, Stage::Eval, Stage::Profile, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Transform => "transform",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Profile => "profile",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = FwsError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| FwsError::Config(format!("unknown stage {s:?}")))
    }
}

fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir if matches!(out.components().next_back(), Some(Component::Normal(_))) => {
                out.pop();
            }
            c => out.push(c),
        }
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    out
}

/// Artifact locations of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPaths {
    pub out: PathBuf,
    pub data: PathBuf,
}

impl RunPaths {
    /// `output_dir` and a relative `data.root` resolve against `root` and
    /// the output directory respectively. `..` is resolved lexically, so the
    /// data path is valid before the output directory exists.
    pub fn new(cfg: &RunConfig, root: &Path) -> Self {
        let out = normalize(&root.join(&cfg.output_dir));
        let data = normalize(&out.join(&cfg.data.root));
        Self { out, data }
    }

    pub fn config(&self) -> PathBuf {
        self.out.join("config.toml")
    }
    pub fn data_manifest(&self) -> PathBuf {
        self.data.join("manifest.json")
    }
    pub fn schedule(&self) -> PathBuf {
        self.out.join("schedule.json")
    }
    pub fn eval_grid(&self) -> PathBuf {
        self.out.join("eval_grid.json")
    }
    pub fn preview(&self) -> PathBuf {
        self.out.join("preview")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.out.join("checkpoint")
    }
    pub fn train_log(&self) -> PathBuf {
        self.out.join("train_log.jsonl")
    }
    pub fn train_summary(&self) -> PathBuf {
        self.out.join("train_summary.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.out.join("metrics.jsonl")
    }
    pub fn timing(&self) -> PathBuf {
        self.out.join("timing.jsonl")
    }
    pub fn timing_summary(&self) -> PathBuf {
        self.out.join("timing_summary.csv")
    }
    pub fn iou_plot(&self) -> PathBuf {
        self.out.join("iou_by_shots.svg")
    }
    pub fn timing_plot(&self) -> PathBuf {
        self.out.join("inference_time.svg")
    }
}

/// A JSON artifact with its provenance.
#[derive(Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_fingerprint: String,
    pub seed: u64,
    pub content: T,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitInfo {
    pub split: String,
    pub support: usize,
    pub query: usize,
    pub identity: String,
    pub synth_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainLogLine {
    config_fingerprint: String,
    seed: u64,
    #[serde(flatten)]
    log: EpochLog,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub learner: Learner,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub halted: Option<String>,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| FwsError::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| FwsError::io(path, e))?;
    f.write_all(&buf).map_err(|e| FwsError::io(path, e))
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| FwsError::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    paths: RunPaths,
}

impl Ctx<'_> {
    fn bundle(&self, split: &str) -> Result<DatasetBundle> {
        let mut b = load_dataset(&self.paths.data, split, &self.cfg.data.load)?;
        b.name = split.to_string();
        Ok(b)
    }

    fn checkpoint(&self) -> Result<(UNet, ParamSet<f32>)> {
        let (net, params, meta) = load_checkpoint(&self.paths.checkpoint())?;
        let want = self.cfg.train_fingerprint();
        if meta.config_fingerprint != want {
            return Err(FwsError::Config(format!(
                "checkpoint {} was trained with config {} but the current config is {want}",
                self.paths.checkpoint().display(),
                meta.config_fingerprint
            )));
        }
        Ok((net, params))
    }
}

fn split_dir_ok(paths: &RunPaths, split: &str) -> Result<()> {
    let d = paths.data.join(split);
    if d.is_dir() {
        Ok(())
    } else {
        Err(FwsError::Config(format!("data.root: dataset split {} does not exist", d.display())))
    }
}

/// Fails before anything is written when a requested stage lacks inputs
/// that no earlier requested stage produces.
fn preflight(cfg: &RunConfig, stages: &[Stage], paths: &RunPaths) -> Result<()> {
    let has = |s: Stage| stages.contains(&s);
    if !has(Stage::Synth) {
        if has(Stage::Transform) || has(Stage::Train) {
            split_dir_ok(paths, &cfg.data.train_split)?;
            if has(Stage::Train) && !cfg.data.val_split.is_empty() {
                split_dir_ok(paths, &cfg.data.val_split)?;
            }
        }
        if has(Stage::Eval) || has(Stage::Profile) {
            split_dir_ok(paths, &cfg.data.test_split)?;
        }
    }
    if (has(Stage::Eval) || has(Stage::Profile)) && !has(Stage::Train) && !paths.checkpoint().join("manifest.json").is_file() {
        return Err(FwsError::Config(format!("no checkpoint at {}; run the train stage first", paths.checkpoint().display())));
    }
    if has(Stage::Report) && !has(Stage::Eval) && !has(Stage::Profile) && !paths.metrics().is_file() && !paths.timing().is_file() {
        return Err(FwsError::Config(format!("nothing to report in {}; run eval or profile first", paths.out.display())));
    }
    Ok(())
}

/// Runs the requested stages (in pipeline order) under `root`.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage], root: &Path) -> Result<RunPaths> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg, root);
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    preflight(cfg, &stages, &paths)?;
    fs::create_dir_all(&paths.out).map_err(|e| FwsError::io(&paths.out, e))?;
    fs::write(paths.config(), format!("# config_fingerprint={}\n{}", cfg.fingerprint(), cfg.to_toml()?))
        .map_err(|e| FwsError::io(paths.config(), e))?;
    let ctx = Ctx { cfg, paths };
    for st in stages {
        log::info!("stage {}", st.name());
        match st {
            Stage::Synth => synth(&ctx)?,
            Stage::Transform => transform(&ctx)?,
            Stage::Train => train(&ctx)?,
            Stage::Eval => eval(&ctx)?,
            Stage::Profile => profile(&ctx)?,
            Stage::Report => report(&ctx)?,
        }
    }
    Ok(ctx.paths)
}

fn synth(ctx: &Ctx) -> Result<()> {
    let d = &ctx.cfg.data;
    let s = &d.synth;
    let mut splits = vec![(d.train_split.as_str(), s.train, s.train_support)];
    if !d.val_split.is_empty() && s.val > 0 {
        splits.push((d.val_split.as_str(), s.val, s.val_support));
    }
    splits.push((d.test_split.as_str(), s.test, s.test_support));
    let mut info = Vec::new();
    for (i, (split, count, support)) in splits.into_iter().enumerate() {
        let seed = s.spec.seed.wrapping_add(i as u64 * 0x1000_0000);
        let samples = generate_synthetic(&SynthSpec { count, seed, ..s.spec.clone() })?;
        let bundle = DatasetBundle::split(split, samples, support)?;
        save_dataset(&bundle, &ctx.paths.data, split)?;
        log::info!("wrote {count} synthetic images to {}", ctx.paths.data.join(split).display());
        info.push(SplitInfo {
            split: split.to_string(),
            support: bundle.support.len(),
            query: bundle.query.len(),
            identity: bundle.identity(),
            synth_seed: seed,
        });
    }
    write_json(
        &ctx.paths.data_manifest(),
        &Stamped { config_fingerprint: ctx.cfg.fingerprint(), seed: s.spec.seed, content: info },
    )
}

fn schedule_for(ctx: &Ctx, bundle: &DatasetBundle) -> Result<OmniSchedule> {
    build_omni_schedule(bundle, &ctx.cfg.omni)
}

fn eval_cells(ctx: &Ctx, bundle: &DatasetBundle) -> Result<Vec<EpisodeSpec>> {
    let g = &ctx.cfg.eval;
    enumerate_eval_grid(g.mode, &g.shots, &g.techniques, bundle.support.len(), bundle.query.len(), g.query_batch, ctx.cfg.seed)
}

/// Writes the Omni schedule, the evaluation grid, and one sparse-label
/// preview per technique.
fn transform(ctx: &Ctx) -> Result<()> {
    let fp = ctx.cfg.fingerprint();
    let train = ctx.bundle(&ctx.cfg.data.train_split)?;
    let schedule = schedule_for(ctx, &train)?;
    log::info!("omni schedule: {} episodes", schedule.len());
    write_json(&ctx.paths.schedule(), &Stamped { config_fingerprint: fp.clone(), seed: ctx.cfg.omni.seed, content: &schedule })?;
    if split_dir_ok(&ctx.paths, &ctx.cfg.data.test_split).is_ok() {
        let test = ctx.bundle(&ctx.cfg.data.test_split)?;
        let cells = eval_cells(ctx, &test)?;
        write_json(&ctx.paths.eval_grid(), &Stamped { config_fingerprint: fp.clone(), seed: ctx.cfg.seed, content: &cells })?;
    }
    let dir = ctx.paths.preview();
    fs::create_dir_all(&dir).map_err(|e| FwsError::io(&dir, e))?;
    if let Some(sample) = train.support.first() {
        for opts in &ctx.cfg.omni.techniques {
            let density = match opts.density.values() {
                Some(v) => v[v.len() / 2],
                None => opts.draw(&mut ChaCha8Rng::seed_from_u64(ctx.cfg.seed)),
            };
            let p = SparsifyParams { technique: opts.technique, density, sizes: ctx.cfg.sparsify, seed: ctx.cfg.seed };
            let out = sparsify(&sample.label, &p)?;
            write_mask(&dir.join(format!("{}_{}.png", sample.id, opts.technique)), &out.label)?;
        }
    }
    Ok(())
}

fn train(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let bundle = ctx.bundle(&cfg.data.train_split)?;
    let val_bundle = if cfg.data.val_split.is_empty() { None } else { Some(ctx.bundle(&cfg.data.val_split)?) };
    let val_cells = match &val_bundle {
        Some(vb) => {
            let g = &cfg.validation;
            enumerate_eval_grid(g.mode, &g.shots, &g.techniques, vb.support.len(), vb.query.len(), g.query_batch, cfg.seed)?
        }
        None => Vec::new(),
    };
    let validation = val_bundle.as_ref().map(|b| Validation { bundle: b, cells: &val_cells });
    let net = UNet::new(cfg.net.clone())?;
    let init = net.init::<f32>(cfg.seed);
    log::info!("training {} ({} parameters) on {} images", cfg.train.learner, init.total_count(), bundle.support.len() + bundle.query.len());
    let outcome = if cfg.train.learner == Learner::SlBaseline {
        sl_train(&net, init, &bundle, &cfg.train, &cfg.sparsify, validation.as_ref())?
    } else if cfg.train.learner.is_omni() {
        let schedule = schedule_for(ctx, &bundle)?;
        meta_train(&net, init, TrainSource::Omni { bundle: &bundle, schedule: &schedule }, &cfg.train, &cfg.sparsify, validation.as_ref())?
    } else {
        let source = TrainSource::Sampled { bundle: &bundle, techniques: &cfg.omni.techniques };
        meta_train(&net, init, source, &cfg.train, &cfg.sparsify, validation.as_ref())?
    };
    if let Some(reason) = &outcome.halted {
        log::warn!("training halted early ({reason}); keeping the last good parameters");
    }
    let fp = cfg.train_fingerprint();
    let meta = CheckpointManifest {
        net: cfg.net.clone(),
        learner: cfg.train.learner.name().to_string(),
        seed: cfg.seed,
        epoch: outcome.best_epoch,
        param_count: 0,
        config_fingerprint: fp.clone(),
        params_sha256: String::new(),
    };
    save_checkpoint(&ctx.paths.checkpoint(), &outcome.params, &meta)?;
    let lines: Vec<TrainLogLine> = outcome
        .log
        .iter()
        .map(|l| TrainLogLine { config_fingerprint: fp.clone(), seed: cfg.train.seed, log: l.clone() })
        .collect();
    write_lines(&ctx.paths.train_log(), &lines)?;
    write_json(
        &ctx.paths.train_summary(),
        &Stamped {
            config_fingerprint: fp,
            seed: cfg.train.seed,
            content: TrainSummary {
                learner: cfg.train.learner,
                best_epoch: outcome.best_epoch,
                epochs_run: outcome.log.len(),
                halted: outcome.halted,
            },
        },
    )
}

fn eval(ctx: &Ctx) -> Result<()> {
    let (net, params) = ctx.checkpoint()?;
    let test = ctx.bundle(&ctx.cfg.data.test_split)?;
    let cells = eval_cells(ctx, &test)?;
    log::info!("evaluating {} cells", cells.len());
    let records = evaluate_cells(&net, &params, &test, &cells, &ctx.cfg.sparsify, &ctx.cfg.train.eval_settings(), &ctx.cfg.eval_fingerprint())?;
    write_jsonl(&ctx.paths.metrics(), &records)
}

fn profile(ctx: &Ctx) -> Result<()> {
    let (net, params) = ctx.checkpoint()?;
    let test = ctx.bundle(&ctx.cfg.data.test_split)?;
    let p = &ctx.cfg.profile;
    let req = ProfileRequest {
        learners: if p.learners.is_empty() { vec![ctx.cfg.train.learner] } else { p.learners.clone() },
        shots: p.shots.clone(),
        batch_sizes: p.batch_sizes.clone(),
        reps: p.reps,
        queries: p.queries,
        technique: p.technique,
        density: p.density,
        sizes: ctx.cfg.sparsify,
        fingerprint: ctx.cfg.profile_fingerprint(),
    };
    let base = ctx.cfg.train.eval_settings();
    let mut records = profile_inference(&net, &params, &test, &base, &req)?;
    records.extend(profile_prediction(&net, &params, &test, &base, &req)?);
    write_lines(&ctx.paths.timing(), &records)
}

fn report(ctx: &Ctx) -> Result<()> {
    if ctx.paths.metrics().is_file() {
        let fp = ctx.cfg.eval_fingerprint();
        let records = read_jsonl(&ctx.paths.metrics())?;
        if let Some(r) = records.iter().find(|r: &&MetricRecord| r.config_fingerprint != fp) {
            return Err(FwsError::Config(format!("metrics were produced by config {} but the current config is {fp}", r.config_fingerprint)));
        }
        write_metric_summaries(&ctx.paths.out, &records, &fp)?;
        plot_iou_by_shots(&ctx.paths.iou_plot(), &records, &fp)?;
    }
    if ctx.paths.timing().is_file() {
        let fp = ctx.cfg.profile_fingerprint();
        let records: Vec<TimingRecord> = read_lines(&ctx.paths.timing())?;
        if let Some(r) = records.iter().find(|r| r.config_fingerprint != fp) {
            return Err(FwsError::Config(format!("timings were produced by config {} but the current config is {fp}", r.config_fingerprint)));
        }
        let summaries = summarize_timing(&records);
        write_timing_summary(&ctx.paths.timing_summary(), &summaries, &fp)?;
        plot_inference_time(&ctx.paths.timing_plot(), &summaries, &fp)?;
    }
    Ok(())
}

/// Sparsifies one dense mask file into another.
pub fn sparsify_file(input: &Path, output: &Path, params: &SparsifyParams) -> Result<Option<String>> {
    let dense = crate::data::read_mask(input, false)?;
    let out = sparsify(&dense, params)?;
    write_mask(output, &out.label)?;
    Ok(out.warning)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("fit".parse::<Stage>().is_err());
    }

    #[test]
    fn paths_resolve_parent_components_lexically() {
        let mut cfg = RunConfig { output_dir: PathBuf::from("dir/run_a"), ..RunConfig::default() };
        cfg.data.root = PathBuf::from("../shared");
        let p = RunPaths::new(&cfg, Path::new("/r"));
        assert_eq!(p.out, Path::new("/r/dir/run_a"));
        assert_eq!(p.data, Path::new("/r/dir/shared"));
        cfg.output_dir = PathBuf::from(".");
        cfg.data.root = PathBuf::from("../../x");
        assert_eq!(RunPaths::new(&cfg, Path::new(".")).data, Path::new("../../x"));
        assert_eq!(RunPaths::new(&cfg, Path::new(".")).out, Path::new("."));
    }

    #[test]
    fn missing_dataset_is_a_config_error_without_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { output_dir: "run".into(), ..RunConfig::default() };
        let err = run_pipeline(&cfg, &[Stage::Train], dir.path()).unwrap_err();
        assert!(matches!(err, FwsError::Config(_)), "{err}");
        assert!(err.to_string().contains("data.root"), "{err}");
        assert!(!dir.path().join("run").exists());
    }
}
