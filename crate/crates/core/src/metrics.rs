//! IoU over class groups, confidence intervals, and result aggregation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FwsError, Result};
use crate::image::{LabelImage, CUP, RIM};
use crate::sparsify::Technique;

/// Disc is rim plus cup.
pub const OD_GROUP: [u8; 2] = [RIM, CUP];
pub const OC_GROUP: [u8; 1] = [CUP];

/// IoU of the pixels whose class is in `group`; an empty union scores
/// `empty_union`.
pub fn iou_with(pred: &LabelImage, gt: &LabelImage, group: &[u8], empty_union: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(FwsError::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
        let (a, b) = (group.contains(&p), group.contains(&g));
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { empty_union } else { inter as f64 / union as f64 })
}

/// IoU where an empty union counts as agreement (1).
pub fn iou(pred: &LabelImage, gt: &LabelImage, group: &[u8]) -> Result<f64> {
    iou_with(pred, gt, group, 1.0)
}

/// `(IoU_disc, IoU_cup)`.
pub fn od_oc_iou(pred: &LabelImage, gt: &LabelImage) -> Result<(f64, f64)> {
    Ok((iou(pred, gt, &OD_GROUP)?, iou(pred, gt, &OC_GROUP)?))
}

/// Standard normal quantile (Acklam's rational approximation, |error| < 1.2e-9).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] =
        [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383_577_518_672_69e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] =
        [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Mean and two-sided normal-approximation interval `mean ± z·s/√n`, with
/// `s` the population standard deviation. Constant input gives `[v, v]`.
pub fn mean_ci_unclipped(values: &[f64], level: f64) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], values[0], values[0]);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let half = normal_quantile(0.5 + level / 2.0) * (var / n as f64).sqrt();
    (mean, mean - half, mean + half)
}

/// [`mean_ci_unclipped`] for fractions: the interval is clipped to `[0, 1]`.
pub fn mean_ci(values: &[f64], level: f64) -> (f64, f64, f64) {
    let (m, lo, hi) = mean_ci_unclipped(values, level);
    (m, lo.max(0.0), hi.min(1.0))
}

/// One evaluated query image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub learner: String,
    pub dataset: String,
    pub shots: usize,
    pub technique: Technique,
    pub density: f64,
    pub seed: u64,
    pub query_id: String,
    pub iou_od: f64,
    pub iou_oc: f64,
    pub overhead_time: f64,
    pub predict_time: f64,
    pub config_fingerprint: String,
}

impl MetricRecord {
    pub fn mean_iou(&self) -> f64 {
        (self.iou_od + self.iou_oc) / 2.0
    }

    /// The record with timing fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self { overhead_time: 0.0, predict_time: 0.0, ..self.clone() }
    }
}

pub fn write_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| FwsError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| FwsError::io(path, e))?;
    }
    w.flush().map_err(|e| FwsError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = std::fs::File::open(path).map_err(|e| FwsError::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| FwsError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Mean and interval of one structure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    fn of(values: &[f64]) -> Self {
        let (mean, lo, hi) = mean_ci(values, 0.95);
        Self { mean, lo, hi }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverallRow {
    pub learner: String,
    pub dataset: String,
    pub n: usize,
    pub od: Interval,
    pub oc: Interval,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BestRow {
    pub learner: String,
    pub dataset: String,
    pub shots: usize,
    pub technique: Technique,
    pub density: f64,
    pub n: usize,
    pub od: Interval,
    pub oc: Interval,
    pub mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub overall: Vec<OverallRow>,
    pub best: Vec<BestRow>,
}

type Cell = (usize, Technique, i64);

fn density_key(d: f64) -> i64 {
    (d * 1e6).round() as i64
}

/// Overall means per (learner, dataset), and the (shots, technique,
/// density) cell with the highest mean of `(IoU_OD + IoU_OC) / 2`. Ties go
/// to the first cell in (shots, technique, density) order.
pub fn summarize(records: &[MetricRecord]) -> Summary {
    let mut groups: BTreeMap<(String, String), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.learner.clone(), r.dataset.clone())).or_default().push(r);
    }
    let mut summary = Summary::default();
    for ((learner, dataset), rs) in groups {
        let od: Vec<f64> = rs.iter().map(|r| r.iou_od).collect();
        let oc: Vec<f64> = rs.iter().map(|r| r.iou_oc).collect();
        let mean = rs.iter().map(|r| r.mean_iou()).sum::<f64>() / rs.len() as f64;
        summary.overall.push(OverallRow {
            learner: learner.clone(),
            dataset: dataset.clone(),
            n: rs.len(),
            od: Interval::of(&od),
            oc: Interval::of(&oc),
            mean,
        });
        let mut cells: BTreeMap<Cell, Vec<&MetricRecord>> = BTreeMap::new();
        for r in &rs {
            cells.entry((r.shots, r.technique, density_key(r.density))).or_default().push(r);
        }
        let mut best: Option<BestRow> = None;
        for cell in cells.values() {
            let m = cell.iter().map(|r| r.mean_iou()).sum::<f64>() / cell.len() as f64;
            if best.as_ref().is_none_or(|b| m > b.mean) {
                let od: Vec<f64> = cell.iter().map(|r| r.iou_od).collect();
                let oc: Vec<f64> = cell.iter().map(|r| r.iou_oc).collect();
                best = Some(BestRow {
                    learner: learner.clone(),
                    dataset: dataset.clone(),
                    shots: cell[0].shots,
                    technique: cell[0].technique,
                    density: cell[0].density,
                    n: cell.len(),
                    od: Interval::of(&od),
                    oc: Interval::of(&oc),
                    mean: m,
                });
            }
        }
        summary.best.extend(best);
    }
    summary
}

/// Per-cell means, one row per (learner, dataset, shots, technique, density).
pub fn cell_means(records: &[MetricRecord]) -> Vec<(String, String, usize, Technique, f64, Interval, Interval)> {
    let mut cells: BTreeMap<(String, String, Cell), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.learner.clone(), r.dataset.clone(), (r.shots, r.technique, density_key(r.density))))
            .or_default()
            .push(r);
    }
    cells
        .into_iter()
        .map(|((l, d, (s, t, _)), rs)| {
            let od: Vec<f64> = rs.iter().map(|r| r.iou_od).collect();
            let oc: Vec<f64> = rs.iter().map(|r| r.iou_oc).collect();
            (l, d, s, t, rs[0].density, Interval::of(&od), Interval::of(&oc))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(v: &[u8]) -> LabelImage {
        LabelImage::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn iou_hand_values() {
        let a = img(&[1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(iou(&a, &a, &[1]).unwrap(), 1.0);
        let b = img(&[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(iou(&a, &b, &[1]).unwrap(), 0.0);
        let c = img(&[0, 0, 1, 1, 1, 1, 0, 0]);
        assert!((iou(&a, &c, &[1]).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        let z = img(&[0; 8]);
        assert_eq!(iou(&z, &z, &[2]).unwrap(), 1.0);
        assert_eq!(iou_with(&z, &z, &[2], 0.0).unwrap(), 0.0);
        assert!(iou(&a, &img(&[0; 4]), &[1]).is_err());
    }

    #[test]
    fn od_oc_groups() {
        let gt = img(&[0, 1, 1, 2, 2, 0]);
        assert_eq!(od_oc_iou(&gt, &gt).unwrap(), (1.0, 1.0));
        // All disc predicted as cup: disc is still right; cup overlap 2 of 4.
        let pred = img(&[0, 2, 2, 2, 2, 0]);
        assert_eq!(od_oc_iou(&pred, &gt).unwrap(), (1.0, 0.5));
    }

    #[test]
    fn ci_values() {
        assert_eq!(mean_ci(&[0.4, 0.4, 0.4], 0.95), (0.4, 0.4, 0.4));
        let (m, lo, hi) = mean_ci_unclipped(&[0.0, 1.0], 0.95);
        assert_eq!(m, 0.5);
        assert!((hi - m - 0.692951).abs() < 1e-5, "{}", hi - m);
        assert!((m - lo - 0.692951).abs() < 1e-5);
        assert_eq!(mean_ci(&[0.0, 1.0], 0.95), (0.5, 0.0, 1.0));
        assert_eq!(mean_ci(&[0.7], 0.95), (0.7, 0.7, 0.7));
        let base = [0.2, 0.8, 0.5, 0.3];
        let rep: Vec<f64> = base.iter().cycle().take(16).copied().collect();
        let w = |v: &[f64]| {
            let (_, lo, hi) = mean_ci_unclipped(v, 0.95);
            hi - lo
        };
        // Four times the same data halves the width.
        assert!((w(&rep) / w(&base) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quantile_matches_table() {
        assert!((normal_quantile(0.975) - 1.959963985).abs() < 1e-8);
        assert!((normal_quantile(0.5)).abs() < 1e-12);
        assert!((normal_quantile(0.01) + 2.326347874).abs() < 1e-8);
    }

    fn rec(shots: usize, t: Technique, od: f64, oc: f64) -> MetricRecord {
        MetricRecord {
            learner: "l".into(),
            dataset: "d".into(),
            shots,
            technique: t,
            density: 0.5,
            seed: 0,
            query_id: "q".into(),
            iou_od: od,
            iou_oc: oc,
            overhead_time: 0.1,
            predict_time: 0.2,
            config_fingerprint: "f".into(),
        }
    }

    #[test]
    fn summary_picks_best_cell() {
        let one = summarize(&[rec(1, Technique::Grid, 0.8, 0.6)]);
        assert_eq!(one.overall[0].mean, 0.7);
        assert_eq!(one.best[0].mean, 0.7);
        let s = summarize(&[rec(1, Technique::Grid, 0.7, 0.5), rec(5, Technique::Regions, 0.8, 0.6)]);
        assert_eq!(s.best[0].shots, 5);
        assert_eq!(s.best[0].technique, Technique::Regions);
        assert!((s.best[0].mean - 0.7).abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let rs = vec![rec(1, Technique::Grid, 0.7, 0.5), rec(5, Technique::Points, 0.8, 0.6)];
        write_jsonl(&p, &rs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), rs);
    }

    fn grid(v: Vec<u8>) -> LabelImage {
        LabelImage::from_vec(4, 4, v).unwrap()
    }

    proptest! {
        #[test]
        fn iou_properties(a in proptest::collection::vec(0u8..3, 16), b in proptest::collection::vec(0u8..3, 16)) {
            let (a, b) = (grid(a), grid(b));
            for g in [&OD_GROUP[..], &OC_GROUP[..]] {
                let x = iou(&a, &b, g).unwrap();
                prop_assert!((0.0..=1.0).contains(&x));
                prop_assert_eq!(x, iou(&b, &a, g).unwrap());
                prop_assert_eq!(iou(&a, &a, g).unwrap(), 1.0);
            }
            // Fixing one wrong pixel never lowers the score.
            if let Some(i) = (0..16).find(|&i| a.pixels()[i] != b.pixels()[i]) {
                let mut fixed = a.clone();
                fixed.pixels_mut()[i] = b.pixels()[i];
                for g in [&OD_GROUP[..], &OC_GROUP[..]] {
                    let before = iou(&a, &b, g).unwrap();
                    let in_g = |v: u8| g.contains(&v);
                    if in_g(a.pixels()[i]) != in_g(b.pixels()[i]) {
                        prop_assert!(iou(&fixed, &b, g).unwrap() >= before);
                    }
                }
            }
        }

        #[test]
        fn best_at_least_overall(vals in proptest::collection::vec((0usize..3, 0usize..5, 0.0f64..1.0, 0.0f64..1.0), 1..30)) {
            let rs: Vec<MetricRecord> = vals.iter().map(|&(s, t, a, b)| rec(s + 1, Technique::ALL[t], a, b)).collect();
            let s = summarize(&rs);
            prop_assert!(s.best[0].mean >= s.overall[0].mean - 1e-12);
        }
    }
}
