//! Inference on a new task from its sparsely labelled support set.

use super::loss::{sce_loss, SceNorm};
use super::optim::sgd;
use super::proto::{lcm_broadcast_probs, proto_log_probs, Averaging, PrototypeSet};
use super::steps::{chunks, support_avg_prototypes, support_prototypes, Task};
use crate::autograd::{self as ag, gather_batch, Real, Tensor, Var};
use crate::error::Result;
use crate::image::{LabelImage, SparseLabelImage};
use crate::net::{ParamSet, UNet};

/// Per-pixel argmax over axis 1 of `[B, C, H, W]`; the lowest class wins ties.
pub fn argmax_labels<T: Real>(scores: &Tensor<T>) -> Vec<LabelImage> {
    let s = scores.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let d = scores.data();
    (0..b)
        .map(|i| {
            let px = (0..hw)
                .map(|j| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(i * c + k) * hw + j] > d[(i * c + best) * hw + j] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelImage::from_vec(h, w, px).expect("dims match")
        })
        .collect()
}

fn query_batches<T: Real>(query_x: &Tensor<T>, batch: usize) -> Vec<Tensor<T>> {
    let n = query_x.shape()[0];
    let batch = batch.max(1);
    (0..n)
        .step_by(batch)
        .map(|s| gather_batch(query_x, &(s..(s + batch).min(n)).collect::<Vec<_>>()))
        .collect()
}

/// Segmentation-head prediction of `query_x` in batches.
pub fn predict_seg(net: &UNet, params: &ParamSet<f32>, query_x: &Tensor<f32>, batch: usize) -> Result<Vec<LabelImage>> {
    let consts = params.constants();
    let mut out = Vec::new();
    for q in query_batches(query_x, batch) {
        let lp = net.seg_log_probs(&consts, &Var::constant(q))?;
        out.extend(argmax_labels(lp.value()));
    }
    Ok(out)
}

/// Tunes a copy of `params` on the support with plain gradient descent for
/// `tune_epochs` passes, then predicts the queries.
#[allow(clippy::too_many_arguments)]
pub fn weasel_infer(
    net: &UNet,
    params: &ParamSet<f32>,
    support_x: &Tensor<f32>,
    support_y: &[SparseLabelImage],
    query_x: &Tensor<f32>,
    lr: f64,
    tune_epochs: usize,
    batch: usize,
    norm: SceNorm,
) -> Result<Vec<LabelImage>> {
    let tuned = weasel_tune(net, params, support_x, support_y, lr, tune_epochs, batch, norm)?;
    predict_seg(net, &tuned, query_x, batch)
}

/// The tuning half of [`weasel_infer`].
#[allow(clippy::too_many_arguments)]
pub fn weasel_tune(
    net: &UNet,
    params: &ParamSet<f32>,
    support_x: &Tensor<f32>,
    support_y: &[SparseLabelImage],
    lr: f64,
    tune_epochs: usize,
    batch: usize,
    norm: SceNorm,
) -> Result<ParamSet<f32>> {
    let mut tuned = params.clone();
    for _ in 0..tune_epochs {
        for (x, y) in chunks(support_x, support_y, batch) {
            let vars = tuned.vars();
            let lp = net.seg_log_probs(&vars, &Var::constant(x))?;
            let loss = sce_loss(&lp, &y, norm)?;
            let g: Vec<Tensor<f32>> = ag::grad(&loss, &vars, false).into_iter().map(|g| g.value().clone()).collect();
            if !loss.item().is_finite() || !g.iter().all(Tensor::all_finite) {
                log::warn!("non-finite support loss during tuning; keeping previous parameters");
                return Ok(tuned);
            }
            tuned = sgd(&tuned, &g, lr)?;
        }
    }
    Ok(tuned)
}

/// Support prototypes computed without recording a graph.
pub fn infer_prototypes(
    net: &UNet,
    params: &ParamSet<f32>,
    support_x: &Tensor<f32>,
    support_y: &[SparseLabelImage],
    averaged: bool,
    batch: usize,
    averaging: Averaging,
) -> Result<PrototypeSet<f32>> {
    let consts = params.constants();
    let n = support_y.len();
    let task = Task {
        support_x: support_x.clone(),
        support_y: support_y.to_vec(),
        query_x: Tensor::zeros(&[0]),
        query_y: Vec::new(),
    };
    if averaged {
        support_avg_prototypes(net, &consts, &task, batch, averaging)
    } else {
        support_prototypes(net, &consts, &task, batch.max(n))
    }
}

/// Class probabilities of a query batch against prototypes; batch-shaped
/// prototypes of a different batch size go through LCM expansion.
pub fn proto_probs_any(embed: &Var<f32>, protos: &PrototypeSet<f32>) -> Result<Var<f32>> {
    let b = embed.shape()[0];
    if protos.batch() == 1 || protos.batch() == b {
        Ok(ag::exp(&proto_log_probs(embed, protos)?))
    } else {
        lcm_broadcast_probs(embed, protos)
    }
}

/// Nearest-prototype prediction of the queries.
pub fn protoseg_predict(
    net: &UNet,
    params: &ParamSet<f32>,
    protos: &PrototypeSet<f32>,
    query_x: &Tensor<f32>,
    batch: usize,
) -> Result<Vec<LabelImage>> {
    let consts = params.constants();
    let mut out = Vec::new();
    for q in query_batches(query_x, batch) {
        let e = net.forward_embed(&consts, &Var::constant(q))?;
        out.extend(argmax_labels(proto_probs_any(&e, protos)?.value()));
    }
    Ok(out)
}

/// Prototypes from the support, then nearest-prototype prediction.
#[allow(clippy::too_many_arguments)]
pub fn protoseg_infer(
    net: &UNet,
    params: &ParamSet<f32>,
    support_x: &Tensor<f32>,
    support_y: &[SparseLabelImage],
    query_x: &Tensor<f32>,
    averaged: bool,
    batch: usize,
    averaging: Averaging,
) -> Result<Vec<LabelImage>> {
    let protos = infer_prototypes(net, params, support_x, support_y, averaged, batch, averaging)?;
    protoseg_predict(net, params, &protos, query_x, batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let t = Tensor::new(&[1, 3, 1, 2], vec![0.2f32, 0.5, 0.4, 0.5, 0.4, 0.0]);
        let l = argmax_labels(&t);
        assert_eq!(l[0].pixels(), &[1, 0]);
    }
}
