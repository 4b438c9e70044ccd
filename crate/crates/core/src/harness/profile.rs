//! Wall-clock profiling of inference and per-image prediction.
//!
//! Every measured section runs on a single thread with a monotonic clock.
//! One warm-up repetition per cell runs first and is discarded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::episodes::{DatasetBundle, Episode, EpisodeSpec};
use crate::error::{FwsError, Result};
use crate::learners::{predict_episode, EvalSettings, Learner};
use crate::metrics::{mean_ci_unclipped, od_oc_iou};
use crate::net::{ParamSet, UNet};
use crate::par;
use crate::sparsify::{SizeParams, Technique};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingKind {
    /// Support overhead + query prediction + metric computation.
    Inference,
    /// Query prediction only, per image.
    Prediction,
}

/// One timed repetition; times in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub kind: TimingKind,
    pub learner: Learner,
    pub dataset: String,
    pub shots: usize,
    pub batch: usize,
    pub queries: usize,
    pub rep: usize,
    pub overhead: f64,
    pub predict: f64,
    pub metric: f64,
    /// `overhead + predict + metric` for inference, `predict / queries`
    /// for prediction.
    pub value: f64,
    pub config_fingerprint: String,
}

/// Median and 95% interval of the mean over the repetitions of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub kind: TimingKind,
    pub learner: Learner,
    pub shots: usize,
    pub batch: usize,
    pub reps: usize,
    pub median: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// What to time.
#[derive(Clone, Debug)]
pub struct ProfileRequest {
    pub learners: Vec<Learner>,
    pub shots: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub reps: usize,
    pub queries: usize,
    pub technique: Technique,
    pub density: f64,
    pub sizes: SizeParams,
    pub fingerprint: String,
}

impl ProfileRequest {
    fn validate(&self, bundle: &DatasetBundle) -> Result<()> {
        if self.reps < 3 {
            return Err(FwsError::range("reps", format!("{} (need >= 3)", self.reps)));
        }
        if self.learners.is_empty() || self.shots.is_empty() || self.batch_sizes.is_empty() {
            return Err(FwsError::Config("profiling needs learners, shots and batch sizes".into()));
        }
        if self.batch_sizes.contains(&0) || self.queries == 0 {
            return Err(FwsError::Config("batch sizes and query count must be >= 1".into()));
        }
        if bundle.query.is_empty() {
            return Err(FwsError::Config(format!("dataset {:?} has no query images", bundle.name)));
        }
        for &k in &self.shots {
            if k == 0 || k > bundle.support.len() {
                return Err(FwsError::range("shots", format!("{k} with {} support images", bundle.support.len())));
            }
        }
        self.technique.validate_density(self.density)
    }

    fn episode(&self, bundle: &DatasetBundle, shots: usize) -> Result<Episode> {
        let spec = EpisodeSpec {
            support: (0..shots).collect(),
            query: (0..self.queries.min(bundle.query.len())).collect(),
            technique: self.technique,
            density: self.density,
            seed: 0,
        };
        Episode::materialize(&bundle.support, &bundle.query, &spec, &self.sizes)
    }
}

fn settings(base: &EvalSettings, learner: Learner, batch: usize) -> EvalSettings {
    EvalSettings { learner, batch, ..*base }
}

fn time_cell(reps: usize, mut run: impl FnMut() -> Result<(f64, f64, f64)>) -> Result<Vec<(f64, f64, f64)>> {
    run()?;
    (0..reps).map(|_| run()).collect()
}

/// Times the full inference of each (learner, shots, batch size) cell:
/// support overhead, query prediction and IoU computation.
pub fn profile_inference(
    net: &UNet,
    params: &ParamSet<f32>,
    bundle: &DatasetBundle,
    base: &EvalSettings,
    req: &ProfileRequest,
) -> Result<Vec<TimingRecord>> {
    req.validate(bundle)?;
    let mut out = Vec::new();
    for &shots in &req.shots {
        let ep = req.episode(bundle, shots)?;
        for &learner in &req.learners {
            for &batch in &req.batch_sizes {
                let s = settings(base, learner, batch);
                let samples = par::serial(|| {
                    time_cell(req.reps, || {
                        let t0 = Instant::now();
                        let pred = predict_episode(net, params, &ep, &s)?;
                        let t1 = Instant::now();
                        for (p, gt) in pred.labels.iter().zip(&ep.query_dense) {
                            std::hint::black_box(od_oc_iou(p, gt)?);
                        }
                        let total = t0.elapsed().as_secs_f64();
                        Ok((pred.overhead, pred.predict, t1.elapsed().as_secs_f64().min(total)))
                    })
                })?;
                for (rep, (overhead, predict, metric)) in samples.into_iter().enumerate() {
                    out.push(TimingRecord {
                        kind: TimingKind::Inference,
                        learner,
                        dataset: bundle.name.clone(),
                        shots,
                        batch,
                        queries: ep.query_images.len(),
                        rep,
                        overhead,
                        predict,
                        metric,
                        value: overhead + predict + metric,
                        config_fingerprint: req.fingerprint.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Times query prediction per image for each (learner, batch size), with
/// support overhead and metrics excluded. Uses the first entry of
/// `req.shots`.
pub fn profile_prediction(
    net: &UNet,
    params: &ParamSet<f32>,
    bundle: &DatasetBundle,
    base: &EvalSettings,
    req: &ProfileRequest,
) -> Result<Vec<TimingRecord>> {
    req.validate(bundle)?;
    let shots = req.shots[0];
    let ep = req.episode(bundle, shots)?;
    let q = ep.query_images.len();
    let mut out = Vec::new();
    for &learner in &req.learners {
        for &batch in &req.batch_sizes {
            let s = settings(base, learner, batch);
            let samples = par::serial(|| {
                time_cell(req.reps, || {
                    let pred = predict_episode(net, params, &ep, &s)?;
                    Ok((pred.overhead, pred.predict, 0.0))
                })
            })?;
            for (rep, (overhead, predict, _)) in samples.into_iter().enumerate() {
                out.push(TimingRecord {
                    kind: TimingKind::Prediction,
                    learner,
                    dataset: bundle.name.clone(),
                    shots,
                    batch,
                    queries: q,
                    rep,
                    overhead,
                    predict,
                    metric: 0.0,
                    value: predict / q as f64,
                    config_fingerprint: req.fingerprint.clone(),
                });
            }
        }
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One summary per (kind, learner, shots, batch), in first-seen order.
pub fn summarize_timing(records: &[TimingRecord]) -> Vec<TimingSummary> {
    let mut keys: Vec<(TimingKind, Learner, usize, usize)> = Vec::new();
    for r in records {
        let k = (r.kind, r.learner, r.shots, r.batch);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(kind, learner, shots, batch)| {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| (r.kind, r.learner, r.shots, r.batch) == (kind, learner, shots, batch))
                .map(|r| r.value)
                .collect();
            let (mean, lo, hi) = mean_ci_unclipped(&v, 0.95);
            TimingSummary { kind, learner, shots, batch, reps: v.len(), median: median(&v), mean, lo, hi }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::learners::{Averaging, SceNorm};
    use crate::net::NetConfig;

    fn fixture() -> (UNet, ParamSet<f32>, DatasetBundle) {
        let cfg = NetConfig { base_width: 2, embed_dim: 4, levels: 2, norm_groups: 1, ..NetConfig::default() };
        let net = UNet::new(cfg).unwrap();
        let params = net.init(1);
        let samples = generate_synthetic(&SynthSpec { count: 6, image_size: 32, ..SynthSpec::default() }).unwrap();
        (net, params, DatasetBundle::split("p", samples, 4).unwrap())
    }

    fn base() -> EvalSettings {
        EvalSettings {
            learner: Learner::Protoseg,
            batch: 2,
            inner_lr: 0.01,
            tune_epochs: 1,
            sce_norm: SceNorm::AllPixels,
            averaging: Averaging::Micro,
        }
    }

    fn request(reps: usize) -> ProfileRequest {
        ProfileRequest {
            learners: vec![Learner::OProtoseg, Learner::EoProtoseg],
            shots: vec![1, 3],
            batch_sizes: vec![2],
            reps,
            queries: 2,
            technique: Technique::Regions,
            density: 0.5,
            sizes: SizeParams::default(),
            fingerprint: "f".into(),
        }
    }

    #[test]
    fn records_reps_per_cell_without_warmup() {
        let (net, params, b) = fixture();
        let recs = profile_inference(&net, &params, &b, &base(), &request(3)).unwrap();
        assert_eq!(recs.len(), 2 * 2 * 3);
        let s = summarize_timing(&recs);
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|c| c.reps == 3 && c.median > 0.0 && c.lo <= c.mean && c.mean <= c.hi));
        assert!(recs.iter().all(|r| (r.value - (r.overhead + r.predict + r.metric)).abs() < 1e-12));
        let p = profile_prediction(&net, &params, &b, &base(), &request(3)).unwrap();
        assert_eq!(p.len(), 2 * 3);
        assert!(p.iter().all(|r| r.kind == TimingKind::Prediction && r.shots == 1 && r.value > 0.0));
    }

    #[test]
    fn rejects_too_few_reps() {
        let (net, params, b) = fixture();
        assert!(profile_inference(&net, &params, &b, &base(), &request(2)).is_err());
    }

    #[test]
    fn median_matches_sorted_middle() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
