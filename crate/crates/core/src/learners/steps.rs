//! Meta-training steps: one episode in, an outer loss and its gradient out.

use serde::{Deserialize, Serialize};

use super::loss::{ce_loss, sce_loss, SceNorm};
use super::proto::{
    avg_class_prototypes, class_prototypes, concat_prototypes, lcm_expanded_log_probs, proto_log_probs, Averaging,
    PrototypeSet,
};
use crate::autograd::{self as ag, Real, Tensor, Var};
use crate::error::{FwsError, Result};
use crate::image::{Grid, LabelImage, SparseLabelImage, UNANNOTATED};
use crate::net::{inner_update, ParamSet, UNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Weasel,
    Protoseg,
    OWeasel,
    OProtoseg,
    EoWeasel,
    EoProtoseg,
    SlBaseline,
}

impl Learner {
    pub const ALL: [Learner; 7] = [
        Learner::Weasel,
        Learner::Protoseg,
        Learner::OWeasel,
        Learner::OProtoseg,
        Learner::EoWeasel,
        Learner::EoProtoseg,
        Learner::SlBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Learner::Weasel => "weasel",
            Learner::Protoseg => "protoseg",
            Learner::OWeasel => "o_weasel",
            Learner::OProtoseg => "o_protoseg",
            Learner::EoWeasel => "eo_weasel",
            Learner::EoProtoseg => "eo_protoseg",
            Learner::SlBaseline => "sl_baseline",
        }
    }

    pub fn is_proto(self) -> bool {
        matches!(self, Learner::Protoseg | Learner::OProtoseg | Learner::EoProtoseg)
    }

    pub fn is_weasel(self) -> bool {
        matches!(self, Learner::Weasel | Learner::OWeasel | Learner::EoWeasel)
    }

    /// Omni-scheduled learners train on the predefined episode schedule.
    pub fn is_omni(self) -> bool {
        matches!(self, Learner::OWeasel | Learner::OProtoseg | Learner::EoWeasel | Learner::EoProtoseg)
    }

    /// ProtoSeg learners that predict with averaged prototypes.
    pub fn averages_prototypes(self) -> bool {
        self == Learner::EoProtoseg
    }
}

impl std::fmt::Display for Learner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Learner {
    type Err = FwsError;

    fn from_str(s: &str) -> Result<Self> {
        Learner::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| FwsError::Config(format!("unknown learner {s:?}")))
    }
}

/// Settings shared by every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    /// Sub-batch size for the Omni variants.
    pub batch: usize,
    pub inner_lr: f64,
    /// Drops second-order terms of the inner update.
    pub first_order: bool,
    pub sce_norm: SceNorm,
    pub averaging: Averaging,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self { batch: 5, inner_lr: 0.01, first_order: false, sce_norm: SceNorm::AllPixels, averaging: Averaging::Micro }
    }
}

/// Network inputs of one episode.
#[derive(Clone, Debug)]
pub struct Task<T: Real> {
    /// `[S, L, H, W]`
    pub support_x: Tensor<T>,
    pub support_y: Vec<SparseLabelImage>,
    /// `[Q, L, H, W]`
    pub query_x: Tensor<T>,
    pub query_y: Vec<LabelImage>,
}

impl<T: Real> Task<T> {
    pub fn shots(&self) -> usize {
        self.support_y.len()
    }

    /// Support sub-batches of at most `batch` images.
    pub fn support_chunks(&self, batch: usize) -> Vec<(Tensor<T>, Vec<&SparseLabelImage>)> {
        chunks(&self.support_x, &self.support_y, batch)
    }
}

pub(crate) fn chunks<'a, T: Real>(
    x: &Tensor<T>,
    y: &'a [Grid<u8>],
    batch: usize,
) -> Vec<(Tensor<T>, Vec<&'a Grid<u8>>)> {
    let n = y.len();
    let batch = batch.max(1);
    (0..n)
        .step_by(batch)
        .map(|s| {
            let e = (s + batch).min(n);
            let idx: Vec<usize> = (s..e).collect();
            (crate::autograd::gather_batch(x, &idx), y[s..e].iter().collect())
        })
        .collect()
}

fn refs(v: &[Grid<u8>]) -> Vec<&Grid<u8>> {
    v.iter().collect()
}

fn check_finite<T: Real>(loss: &Var<T>, what: &str) -> Result<()> {
    if loss.item().is_finite() {
        Ok(())
    } else {
        Err(FwsError::NonFinite(format!("{what} loss")))
    }
}

fn seg_sce<T: Real>(net: &UNet, params: &[Var<T>], x: &Tensor<T>, y: &[&Grid<u8>], norm: SceNorm) -> Result<Var<T>> {
    let lp = net.seg_log_probs(params, &Var::constant(x.clone()))?;
    sce_loss(&lp, y, norm)
}

fn query_ce<T: Real>(net: &UNet, params: &[Var<T>], task: &Task<T>) -> Result<Var<T>> {
    let lp = net.seg_log_probs(params, &Var::constant(task.query_x.clone()))?;
    ce_loss(&lp, &refs(&task.query_y))
}

/// Query labels with pixels of classes absent from prototype row `rows[i]`
/// turned into the sentinel, so the loss covers present classes only.
fn present_only(labels: &[&Grid<u8>], protos: &PrototypeSet<impl Real>, rows: &[usize]) -> Vec<Grid<u8>> {
    labels
        .iter()
        .zip(rows)
        .map(|(y, &r)| {
            let mut y = (*y).clone();
            y.pixels_mut().iter_mut().for_each(|v| {
                if !protos.present(r, *v as usize) {
                    *v = UNANNOTATED;
                }
            });
            y
        })
        .collect()
}

/// Prototype cross-entropy on the query, via LCM expansion when the
/// prototype batch differs from the query batch. Query pixels of classes
/// absent from the support are left out of the sum.
pub fn proto_query_loss<T: Real>(net: &UNet, params: &[Var<T>], task: &Task<T>, protos: &PrototypeSet<T>) -> Result<Var<T>> {
    let eq = net.forward_embed(params, &Var::constant(task.query_x.clone()))?;
    let bq = eq.shape()[0];
    let (lp, qi, rows): (Var<T>, Vec<usize>, Vec<usize>) = if protos.batch() == 1 || protos.batch() == bq {
        let rows = (0..bq).map(|i| if protos.batch() == 1 { 0 } else { i }).collect();
        (proto_log_probs(&eq, protos)?, (0..bq).collect(), rows)
    } else {
        let (lp, qi) = lcm_expanded_log_probs(&eq, protos)?;
        let rows = (0..qi.len()).map(|k| k % protos.batch()).collect();
        (lp, qi, rows)
    };
    let labels: Vec<&Grid<u8>> = qi.iter().map(|&i| &task.query_y[i]).collect();
    let masked = present_only(&labels, protos, &rows);
    sce_loss(&lp, &refs(&masked), SceNorm::AllPixels)
}

/// Batch-shaped prototypes from the support embedded in sub-batches.
pub fn support_prototypes<T: Real>(net: &UNet, params: &[Var<T>], task: &Task<T>, batch: usize) -> Result<PrototypeSet<T>> {
    let classes = net.config().classes;
    let sets = task
        .support_chunks(batch)
        .into_iter()
        .map(|(x, y)| class_prototypes(&net.forward_embed(params, &Var::constant(x))?, &y, classes))
        .collect::<Result<Vec<_>>>()?;
    if sets.len() == 1 {
        return Ok(sets.into_iter().next().expect("one set"));
    }
    concat_prototypes(&sets)
}

/// Averaged `[1, C, M]` prototypes from the support embedded in sub-batches.
pub fn support_avg_prototypes<T: Real>(
    net: &UNet,
    params: &[Var<T>],
    task: &Task<T>,
    batch: usize,
    averaging: Averaging,
) -> Result<PrototypeSet<T>> {
    let batches = task
        .support_chunks(batch)
        .into_iter()
        .map(|(x, y)| Ok((net.forward_embed(params, &Var::constant(x))?, y)))
        .collect::<Result<Vec<_>>>()?;
    avg_class_prototypes(&batches, net.config().classes, averaging)
}

/// Inner update on the whole support followed by the query loss.
fn weasel<T: Real>(net: &UNet, params: &[Var<T>], task: &Task<T>, cfg: &StepConfig) -> Result<Var<T>> {
    let ls = seg_sce(net, params, &task.support_x, &refs(&task.support_y), cfg.sce_norm)?;
    check_finite(&ls, "support")?;
    let g = ag::grad(&ls, params, !cfg.first_order);
    let adapted = inner_update(params, &g, cfg.inner_lr)?;
    query_ce(net, &adapted, task)
}

/// One inner update per support sub-batch, applied sequentially.
fn o_weasel<T: Real>(net: &UNet, params: &[Var<T>], task: &Task<T>, cfg: &StepConfig) -> Result<Var<T>> {
    let mut adapted = params.to_vec();
    for (x, y) in task.support_chunks(cfg.batch) {
        let ls = seg_sce(net, &adapted, &x, &y, cfg.sce_norm)?;
        check_finite(&ls, "support")?;
        let g = ag::grad(&ls, &adapted, !cfg.first_order);
        adapted = inner_update(&adapted, &g, cfg.inner_lr)?;
    }
    query_ce(net, &adapted, task)
}

/// Sub-batch support losses summed at the original parameters, then a
/// single inner update.
fn eo_weasel<T: Real>(net: &UNet, params: &[Var<T>], task: &Task<T>, cfg: &StepConfig) -> Result<Var<T>> {
    let mut total: Option<Var<T>> = None;
    for (x, y) in task.support_chunks(cfg.batch) {
        let ls = seg_sce(net, params, &x, &y, cfg.sce_norm)?;
        total = Some(match total {
            Some(t) => ag::add(&t, &ls),
            None => ls,
        });
    }
    let total = total.ok_or_else(|| FwsError::Shape("empty support".into()))?;
    check_finite(&total, "support")?;
    let g = ag::grad(&total, params, !cfg.first_order);
    let adapted = inner_update(params, &g, cfg.inner_lr)?;
    query_ce(net, &adapted, task)
}

/// Outer loss of one step as a graph node over `params`.
pub fn step_loss<T: Real>(learner: Learner, net: &UNet, params: &[Var<T>], task: &Task<T>, cfg: &StepConfig) -> Result<Var<T>> {
    if task.support_y.is_empty() || task.query_y.is_empty() {
        return Err(FwsError::Shape("episode needs at least one support and one query image".into()));
    }
    let loss = match learner {
        Learner::Weasel => weasel(net, params, task, cfg)?,
        Learner::OWeasel => o_weasel(net, params, task, cfg)?,
        Learner::EoWeasel => eo_weasel(net, params, task, cfg)?,
        Learner::Protoseg => {
            let protos = support_prototypes(net, params, task, task.shots())?;
            proto_query_loss(net, params, task, &protos)?
        }
        Learner::OProtoseg => {
            let protos = support_prototypes(net, params, task, cfg.batch)?;
            proto_query_loss(net, params, task, &protos)?
        }
        Learner::EoProtoseg => {
            let protos = support_avg_prototypes(net, params, task, cfg.batch, cfg.averaging)?;
            proto_query_loss(net, params, task, &protos)?
        }
        Learner::SlBaseline => query_ce(net, params, task)?,
    };
    check_finite(&loss, "outer")?;
    Ok(loss)
}

/// Outer loss value and its gradient with respect to every parameter.
pub struct StepOutput<T: Real> {
    pub loss: T,
    pub grads: Vec<Tensor<T>>,
}

pub fn meta_step<T: Real>(
    learner: Learner,
    net: &UNet,
    params: &ParamSet<T>,
    task: &Task<T>,
    cfg: &StepConfig,
) -> Result<StepOutput<T>> {
    let vars = params.vars();
    let loss = step_loss(learner, net, &vars, task, cfg)?;
    let grads: Vec<Tensor<T>> = ag::grad(&loss, &vars, false).into_iter().map(|g| g.value().clone()).collect();
    if !grads.iter().all(Tensor::all_finite) {
        return Err(FwsError::NonFinite("outer gradient".into()));
    }
    Ok(StepOutput { loss: loss.item(), grads })
}
