//! Meta-training loops (sampled batches or the Omni schedule) and the
//! fully supervised baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_cells, EvalSettings};
use super::loss::{ce_loss, SceNorm};
use super::optim::{Adam, AdamConfig};
use super::proto::Averaging;
use super::steps::{meta_step, Learner, StepConfig};
use crate::autograd::{self as ag, Tensor, Var};
use crate::episodes::{sample_original_batch, DatasetBundle, Episode, EpisodeSpec, OmniSchedule, TechniqueOptions};
use crate::error::{FwsError, Result};
use crate::image::FundusImage;
use crate::net::{batch_images, ParamSet, UNet};
use crate::sparsify::SizeParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learner: Learner,
    /// Batch size; sub-batch size for the Omni variants.
    pub batch: usize,
    pub epochs: usize,
    /// Steps per epoch in original (sampled) mode.
    pub iterations: usize,
    pub inner_lr: f64,
    /// Support tuning epochs at WeaSeL inference.
    pub tune_epochs: usize,
    pub first_order: bool,
    pub sce_norm: SceNorm,
    pub averaging: Averaging,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learner: Learner::EoProtoseg,
            batch: 5,
            epochs: 10,
            iterations: 20,
            inner_lr: 0.01,
            tune_epochs: 5,
            first_order: false,
            sce_norm: SceNorm::AllPixels,
            averaging: Averaging::Micro,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(FwsError::Config("train.batch must be >= 1".into()));
        }
        if self.learner.is_weasel() && !(self.inner_lr > 0.0) {
            return Err(FwsError::Config("train.inner_lr must be > 0 for WeaSeL learners".into()));
        }
        if !self.learner.is_omni() && self.learner != Learner::SlBaseline && self.iterations == 0 {
            return Err(FwsError::Config("train.iterations must be >= 1 in sampled mode".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(FwsError::Config("train.adam.lr must be > 0".into()));
        }
        Ok(())
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            batch: self.batch,
            inner_lr: self.inner_lr,
            first_order: self.first_order,
            sce_norm: self.sce_norm,
            averaging: self.averaging,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            learner: self.learner,
            batch: self.batch,
            inner_lr: self.inner_lr,
            tune_epochs: self.tune_epochs,
            sce_norm: self.sce_norm,
            averaging: self.averaging,
        }
    }
}

/// Where training episodes come from.
pub enum TrainSource<'a> {
    /// Batches of `cfg.batch` drawn with replacement every step.
    Sampled { bundle: &'a DatasetBundle, techniques: &'a [TechniqueOptions] },
    /// Every schedule episode once per epoch, in a per-epoch order.
    Omni { bundle: &'a DatasetBundle, schedule: &'a OmniSchedule },
}

/// Validation episodes on a target dataset; the best epoch is kept.
pub struct Validation<'a> {
    pub bundle: &'a DatasetBundle,
    pub cells: &'a [EpisodeSpec],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub val_iou: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters of the best validated epoch, or the last good epoch.
    pub params: ParamSet<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Set when a non-finite loss or update stopped training early.
    pub halted: Option<String>,
}

struct Tracker<'a> {
    net: &'a UNet,
    sizes: &'a SizeParams,
    cfg: &'a TrainConfig,
    validation: Option<&'a Validation<'a>>,
    best: Option<(f64, usize, ParamSet<f32>)>,
    last_good: (usize, ParamSet<f32>),
    log: Vec<EpochLog>,
}

impl<'a> Tracker<'a> {
    fn end_epoch(&mut self, epoch: usize, params: &ParamSet<f32>, losses: &[f64], lr: f64) -> Result<()> {
        let val_iou = match self.validation {
            Some(v) => {
                let recs = evaluate_cells(self.net, params, v.bundle, v.cells, self.sizes, &self.cfg.eval_settings(), "")?;
                let m = recs.iter().map(|r| r.mean_iou()).sum::<f64>() / recs.len().max(1) as f64;
                if self.best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                    self.best = Some((m, epoch, params.clone()));
                }
                Some(m)
            }
            None => None,
        };
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        log::info!(
            "epoch {epoch}: {} steps, loss {mean_loss:.5}, lr {lr:.2e}{}",
            losses.len(),
            val_iou.map(|v| format!(", val IoU {v:.4}")).unwrap_or_default()
        );
        self.log.push(EpochLog { epoch, steps: losses.len(), mean_loss, lr, val_iou });
        self.last_good = (epoch, params.clone());
        Ok(())
    }

    fn finish(self, halted: Option<String>) -> TrainOutcome {
        let (best_epoch, params) = match self.best {
            Some((_, e, p)) => (e, p),
            None => self.last_good,
        };
        TrainOutcome { params, best_epoch, log: self.log, halted }
    }
}

fn is_divergence(e: &FwsError) -> bool {
    matches!(e, FwsError::NonFinite(_))
}

/// Meta-trains `init` with Adam and a step learning-rate schedule.
/// Divergence stops training and returns the last good epoch's parameters.
pub fn meta_train(
    net: &UNet,
    init: ParamSet<f32>,
    source: TrainSource<'_>,
    cfg: &TrainConfig,
    sizes: &SizeParams,
    validation: Option<&Validation<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.learner == Learner::SlBaseline {
        return Err(FwsError::Config("the supervised baseline trains with sl_train".into()));
    }
    let step_cfg = cfg.step_config();
    let mut params = init.clone();
    let mut adam = Adam::new(cfg.adam, &params);
    let mut tr = Tracker { net, sizes, cfg, validation, best: None, last_good: (0, init), log: Vec::new() };
    for epoch in 0..cfg.epochs {
        let lr = cfg.adam.lr_at(epoch);
        let start = Instant::now();
        let (bundle, specs): (&DatasetBundle, Vec<EpisodeSpec>) = match &source {
            TrainSource::Sampled { bundle, techniques } => {
                let specs = (0..cfg.iterations)
                    .map(|it| sample_original_batch(bundle, cfg.batch, techniques, cfg.seed, (epoch * cfg.iterations + it) as u64))
                    .collect::<Result<_>>()?;
                (bundle, specs)
            }
            TrainSource::Omni { bundle, schedule } => {
                (bundle, schedule.epoch_order(epoch).into_iter().map(|i| schedule.episodes[i].clone()).collect())
            }
        };
        let mut losses = Vec::with_capacity(specs.len());
        for spec in &specs {
            let task = Episode::materialize(&bundle.support, &bundle.query, spec, sizes)?.task::<f32>()?;
            let out = match meta_step(cfg.learner, net, &params, &task, &step_cfg) {
                Ok(o) => o,
                Err(e) if is_divergence(&e) => {
                    log::error!("epoch {epoch}: {e}; stopping");
                    return Ok(tr.finish(Some(e.to_string())));
                }
                // An unannotated support carries no signal.
                Err(FwsError::NoClasses) => {
                    log::warn!("epoch {epoch}: {} {} support has no annotated pixels; skipping episode", spec.technique, spec.density);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let next = adam.step(&params, &out.grads, lr)?;
            if !next.all_finite() {
                log::error!("epoch {epoch}: non-finite parameters after update; stopping");
                return Ok(tr.finish(Some("non-finite parameters".into())));
            }
            params = next;
            losses.push(out.loss as f64);
        }
        log::debug!("epoch {epoch} took {:.1}s", start.elapsed().as_secs_f64());
        tr.end_epoch(epoch, &params, &losses, lr)?;
    }
    Ok(tr.finish(None))
}

/// Dense cross-entropy training of the segmentation head on every source
/// image, shuffled per epoch.
pub fn sl_train(
    net: &UNet,
    init: ParamSet<f32>,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    sizes: &SizeParams,
    validation: Option<&Validation<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let all: Vec<_> = bundle.support.iter().chain(&bundle.query).collect();
    if all.is_empty() {
        return Err(FwsError::Config(format!("dataset {:?} is empty", bundle.name)));
    }
    let sl_cfg = TrainConfig { learner: Learner::SlBaseline, ..cfg.clone() };
    let mut params = init.clone();
    let mut adam = Adam::new(cfg.adam, &params);
    let mut tr = Tracker { net, sizes, cfg: &sl_cfg, validation, best: None, last_good: (0, init), log: Vec::new() };
    for epoch in 0..cfg.epochs {
        let lr = cfg.adam.lr_at(epoch);
        let mut order: Vec<usize> = (0..all.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            let imgs: Vec<&FundusImage> = chunk.iter().map(|&i| all[i].image.as_ref()).collect();
            let labels: Vec<_> = chunk.iter().map(|&i| all[i].label.as_ref()).collect();
            let x: Tensor<f32> = batch_images(&imgs)?;
            let vars = params.vars();
            let loss = ce_loss(&net.seg_log_probs(&vars, &Var::constant(x))?, &labels)?;
            if !loss.item().is_finite() {
                return Ok(tr.finish(Some("non-finite loss".into())));
            }
            let grads: Vec<Tensor<f32>> = ag::grad(&loss, &vars, false).into_iter().map(|g| g.value().clone()).collect();
            let next = adam.step(&params, &grads, lr)?;
            if !next.all_finite() {
                return Ok(tr.finish(Some("non-finite parameters".into())));
            }
            params = next;
            losses.push(loss.item() as f64);
        }
        tr.end_epoch(epoch, &params, &losses, lr)?;
    }
    Ok(tr.finish(None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::episodes::{build_omni_schedule, default_technique_options, Options, OmniConfig};
    use crate::net::NetConfig;

    fn setup() -> (UNet, DatasetBundle) {
        let net = UNet::new(NetConfig { base_width: 2, embed_dim: 4, levels: 2, norm_groups: 1, ..NetConfig::default() }).unwrap();
        let samples = generate_synthetic(&SynthSpec { count: 10, image_size: 32, ..SynthSpec::default() }).unwrap();
        (net, DatasetBundle::split("t", samples, 7).unwrap())
    }

    fn cfg(learner: Learner) -> TrainConfig {
        TrainConfig { learner, epochs: 2, iterations: 3, batch: 2, ..TrainConfig::default() }
    }

    #[test]
    fn omni_epochs_run_the_whole_schedule() {
        let (net, b) = setup();
        let sched = build_omni_schedule(&b, &OmniConfig { shots: Options::List(vec![1, 3]), ..OmniConfig::default() }).unwrap();
        let c = cfg(Learner::EoProtoseg);
        let out = meta_train(&net, net.init(0), TrainSource::Omni { bundle: &b, schedule: &sched }, &c, &SizeParams::default(), None).unwrap();
        assert!(out.halted.is_none());
        assert_eq!(out.log.iter().map(|l| l.steps).collect::<Vec<_>>(), vec![sched.len(); 2]);
    }

    #[test]
    fn sampled_epochs_run_n_iterations_and_repeat_exactly() {
        let (net, b) = setup();
        let techniques = default_technique_options();
        let run = |l| {
            let src = TrainSource::Sampled { bundle: &b, techniques: &techniques };
            meta_train(&net, net.init(0), src, &cfg(l), &SizeParams::default(), None).unwrap()
        };
        let a = run(Learner::Weasel);
        assert_eq!(a.log.iter().map(|l| l.steps).collect::<Vec<_>>(), vec![3, 3]);
        let again = run(Learner::Weasel);
        assert_eq!(a.log, again.log);
        assert_eq!(a.params.flatten(), again.params.flatten());
        assert_ne!(a.params.flatten(), net.init::<f32>(0).flatten());
    }

    #[test]
    fn validation_keeps_best_epoch_and_sl_trains() {
        let (net, b) = setup();
        let cells = crate::episodes::enumerate_eval_grid(
            crate::episodes::GridMode::Combine,
            &[2],
            &default_technique_options()[..1].iter().map(|t| TechniqueOptions::new(t.technique, Options::List(vec![10.0]))).collect::<Vec<_>>(),
            b.support.len(),
            b.query.len(),
            2,
            0,
        )
        .unwrap();
        let v = Validation { bundle: &b, cells: &cells };
        let out = sl_train(&net, net.init(0), &b, &cfg(Learner::SlBaseline), &SizeParams::default(), Some(&v)).unwrap();
        assert_eq!(out.log.len(), 2);
        let best = out.log.iter().max_by(|x, y| x.val_iou.unwrap().total_cmp(&y.val_iou.unwrap())).unwrap();
        assert!(out.log.iter().all(|l| l.val_iou.is_some()));
        assert_eq!(out.log[out.best_epoch].val_iou, best.val_iou);
    }
}
