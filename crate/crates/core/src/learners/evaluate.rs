//! Episode evaluation shared by validation, `eval`, and profiling.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::infer::{infer_prototypes, predict_seg, protoseg_predict, weasel_tune};
use super::loss::SceNorm;
use super::proto::Averaging;
use super::steps::Learner;
use crate::autograd::Tensor;
use crate::episodes::{DatasetBundle, Episode, EpisodeSpec};
use crate::error::{FwsError, Result};
use crate::image::{FundusImage, LabelImage};
use crate::metrics::{od_oc_iou, MetricRecord};
use crate::net::{batch_images, ParamSet, UNet};
use crate::par;
use crate::sparsify::SizeParams;

/// Inference settings of a trained learner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub learner: Learner,
    pub batch: usize,
    pub inner_lr: f64,
    pub tune_epochs: usize,
    pub sce_norm: SceNorm,
    pub averaging: Averaging,
}

/// Predictions with the seconds spent on the support (`overhead`) and on
/// the queries (`predict`).
pub struct Prediction {
    pub labels: Vec<LabelImage>,
    pub overhead: f64,
    pub predict: f64,
}

fn stack(images: &[std::sync::Arc<FundusImage>]) -> Result<Tensor<f32>> {
    batch_images(&images.iter().map(|a| a.as_ref()).collect::<Vec<_>>())
}

/// Runs the learner's inference procedure on one episode.
pub fn predict_episode(net: &UNet, params: &ParamSet<f32>, episode: &Episode, s: &EvalSettings) -> Result<Prediction> {
    let qx = stack(&episode.query_images)?;
    let t0 = Instant::now();
    if s.learner.is_proto() {
        let sx = stack(&episode.support_images)?;
        let protos =
            infer_prototypes(net, params, &sx, &episode.support_sparse, s.learner.averages_prototypes(), s.batch, s.averaging)?;
        let overhead = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let labels = protoseg_predict(net, params, &protos, &qx, s.batch)?;
        Ok(Prediction { labels, overhead, predict: t1.elapsed().as_secs_f64() })
    } else if s.learner.is_weasel() {
        let sx = stack(&episode.support_images)?;
        let tuned = weasel_tune(net, params, &sx, &episode.support_sparse, s.inner_lr, s.tune_epochs, s.batch, s.sce_norm)?;
        let overhead = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let labels = predict_seg(net, &tuned, &qx, s.batch)?;
        Ok(Prediction { labels, overhead, predict: t1.elapsed().as_secs_f64() })
    } else {
        let labels = predict_seg(net, params, &qx, s.batch)?;
        Ok(Prediction { labels, overhead: 0.0, predict: t0.elapsed().as_secs_f64() })
    }
}

/// One record per query image of every cell. Cells run in parallel; the
/// output order follows `cells`.
pub fn evaluate_cells(
    net: &UNet,
    params: &ParamSet<f32>,
    bundle: &DatasetBundle,
    cells: &[EpisodeSpec],
    sizes: &SizeParams,
    s: &EvalSettings,
    fingerprint: &str,
) -> Result<Vec<MetricRecord>> {
    let per_cell = par::map_slice(cells, |spec| -> Result<Vec<MetricRecord>> {
        let ep = Episode::materialize(&bundle.support, &bundle.query, spec, sizes)?;
        let pred = match predict_episode(net, params, &ep, s) {
            Err(FwsError::NoClasses) => {
                log::warn!(
                    "{} shots, {} {}: support has no annotated pixels; predicting background",
                    spec.shots(),
                    spec.technique,
                    spec.density
                );
                let labels = ep.query_dense.iter().map(|y| LabelImage::filled(y.height(), y.width(), 0)).collect();
                Prediction { labels, overhead: 0.0, predict: 0.0 }
            }
            r => r?,
        };
        let per_image = pred.predict / ep.query_dense.len() as f64;
        pred.labels
            .iter()
            .zip(&ep.query_dense)
            .zip(&spec.query)
            .map(|((p, gt), &qi)| {
                let (iou_od, iou_oc) = od_oc_iou(p, gt)?;
                Ok(MetricRecord {
                    learner: s.learner.name().to_string(),
                    dataset: bundle.name.clone(),
                    shots: spec.shots(),
                    technique: spec.technique,
                    density: spec.density,
                    seed: spec.seed,
                    query_id: bundle.query[qi].id.clone(),
                    iou_od,
                    iou_oc,
                    overhead_time: pred.overhead,
                    predict_time: per_image,
                    config_fingerprint: fingerprint.to_string(),
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in per_cell {
        out.extend(r?);
    }
    Ok(out)
}
