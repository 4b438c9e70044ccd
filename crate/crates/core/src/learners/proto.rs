//! Class prototypes and distance-based class probabilities.

use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Real, Tensor, Var};
use crate::error::{FwsError, Result};
use crate::image::{Grid, UNANNOTATED};

/// Added to the logits of absent classes; their probability underflows to 0.
const ABSENT_LOGIT: f64 = -1e9;
/// Keeps the distance differentiable at zero.
const DIST_EPS: f64 = 1e-12;

/// How averaged prototypes combine batch elements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Total embedding sum over total annotated count.
    #[default]
    Micro,
    /// Mean of per-element prototypes over elements where the class is present.
    Macro,
}

/// Per-class prototypes, shape `[P, C, M]` with `P` the batch size or 1.
#[derive(Clone)]
pub struct PrototypeSet<T: Real> {
    pub protos: Var<T>,
    /// Annotated pixel counts, `counts[p][c]`.
    pub counts: Vec<Vec<usize>>,
}

impl<T: Real> PrototypeSet<T> {
    pub fn batch(&self) -> usize {
        self.counts.len()
    }

    pub fn classes(&self) -> usize {
        self.protos.shape()[1]
    }

    pub fn present(&self, p: usize, c: usize) -> bool {
        self.counts[p][c] > 0
    }
}

/// One-hot class masks `[B, C, HW]` of annotated pixels plus per-class counts.
fn class_masks<T: Real>(labels: &[&Grid<u8>], classes: usize, hw: usize) -> Result<(Tensor<T>, Vec<Vec<usize>>)> {
    let b = labels.len();
    let mut mask = vec![T::zero(); b * classes * hw];
    let mut counts = vec![vec![0usize; classes]; b];
    for (i, y) in labels.iter().enumerate() {
        if y.pixels().len() != hw {
            return Err(FwsError::Shape(format!("label has {} pixels, embedding {hw}", y.pixels().len())));
        }
        for (j, &v) in y.pixels().iter().enumerate() {
            if v == UNANNOTATED {
                continue;
            }
            let c = v as usize;
            if c >= classes {
                return Err(FwsError::range("label value", format!("{c} for {classes} classes")));
            }
            mask[(i * classes + c) * hw + j] = T::one();
            counts[i][c] += 1;
        }
    }
    Ok((Tensor::new(&[b, classes, hw], mask), counts))
}

/// Per-element, per-class embedding sums `[B, C, M]` and counts.
fn class_sums<T: Real>(embed: &Var<T>, labels: &[&Grid<u8>], classes: usize) -> Result<(Var<T>, Vec<Vec<usize>>)> {
    let s = embed.shape();
    let (b, m, hw) = (s[0], s[1], s[2] * s[3]);
    if labels.len() != b {
        return Err(FwsError::Shape(format!("{} labels for {b} embeddings", labels.len())));
    }
    let (mask, counts) = class_masks::<T>(labels, classes, hw)?;
    let e = ag::reshape(embed, &[b, m, hw]);
    Ok((ag::bmm(&Var::constant(mask), &e, false, true), counts))
}

fn inverse_counts<T: Real>(counts: &[Vec<usize>]) -> Tensor<T> {
    let classes = counts.first().map_or(0, Vec::len);
    let data = counts.iter().flatten().map(|&n| T::of(1.0 / n.max(1) as f64)).collect();
    Tensor::new(&[counts.len(), classes, 1], data)
}

/// Masked mean embedding of each class for each batch element.
pub fn class_prototypes<T: Real>(embed: &Var<T>, labels: &[&Grid<u8>], classes: usize) -> Result<PrototypeSet<T>> {
    let (sums, counts) = class_sums(embed, labels, classes)?;
    let protos = ag::mul_bcast(&sums, &Var::constant(inverse_counts(&counts)));
    Ok(PrototypeSet { protos, counts })
}

/// A single `[1, C, M]` prototype per class accumulated over several batches.
pub fn avg_class_prototypes<T: Real>(
    batches: &[(Var<T>, Vec<&Grid<u8>>)],
    classes: usize,
    averaging: Averaging,
) -> Result<PrototypeSet<T>> {
    if batches.is_empty() {
        return Err(FwsError::Shape("no support batches".into()));
    }
    let m = batches[0].0.shape()[1];
    let mut total: Option<Var<T>> = None;
    let mut counts = vec![0usize; classes];
    match averaging {
        Averaging::Micro => {
            for (e, y) in batches {
                let (sums, c) = class_sums(e, y, classes)?;
                let s = ag::sum_to(&sums, &[1, classes, m]);
                total = Some(match total {
                    Some(t) => ag::add(&t, &s),
                    None => s,
                });
                for row in c {
                    for (k, n) in row.into_iter().enumerate() {
                        counts[k] += n;
                    }
                }
            }
            let sums = total.expect("at least one batch");
            let protos = ag::mul_bcast(&sums, &Var::constant(inverse_counts(std::slice::from_ref(&counts))));
            Ok(PrototypeSet { protos, counts: vec![counts] })
        }
        Averaging::Macro => {
            let mut present = vec![0usize; classes];
            for (e, y) in batches {
                let set = class_prototypes(e, y, classes)?;
                let s = ag::sum_to(&set.protos, &[1, classes, m]);
                total = Some(match total {
                    Some(t) => ag::add(&t, &s),
                    None => s,
                });
                for row in &set.counts {
                    for (k, &n) in row.iter().enumerate() {
                        counts[k] += n;
                        present[k] += usize::from(n > 0);
                    }
                }
            }
            let sums = total.expect("at least one batch");
            let inv: Vec<Vec<usize>> = vec![present];
            let protos = ag::mul_bcast(&sums, &Var::constant(inverse_counts(&inv)));
            Ok(PrototypeSet { protos, counts: vec![counts] })
        }
    }
}

/// Concatenates batch-shaped prototype sets along the batch axis.
pub fn concat_prototypes<T: Real>(sets: &[PrototypeSet<T>]) -> Result<PrototypeSet<T>> {
    let first = sets.first().ok_or_else(|| FwsError::Shape("no prototype sets".into()))?;
    let (c, m) = (first.classes(), first.protos.shape()[2]);
    let mut acc = ag::reshape(&first.protos, &[1, first.batch() * c, m]);
    let mut counts = first.counts.clone();
    for s in &sets[1..] {
        acc = ag::concat_channels(&acc, &ag::reshape(&s.protos, &[1, s.batch() * c, m]));
        counts.extend(s.counts.iter().cloned());
    }
    let protos = ag::reshape(&acc, &[counts.len(), c, m]);
    Ok(PrototypeSet { protos, counts })
}

/// Log of the distance-softmax class probabilities, `[B, C, H, W]`.
///
/// Prototypes must have batch 1 or the query batch size; absent classes
/// receive zero probability.
pub fn proto_log_probs<T: Real>(embed: &Var<T>, protos: &PrototypeSet<T>) -> Result<Var<T>> {
    let s = embed.shape().to_vec();
    let (b, m, h, w) = (s[0], s[1], s[2], s[3]);
    let (p, c) = (protos.batch(), protos.classes());
    if protos.protos.shape()[2] != m {
        return Err(FwsError::Shape(format!("prototype depth {} vs embedding {m}", protos.protos.shape()[2])));
    }
    if p != 1 && p != b {
        return Err(FwsError::ProtoBatch { query: b, support: p });
    }
    let hw = h * w;
    let mut mask = vec![T::zero(); b * c];
    for i in 0..b {
        let row = if p == 1 { 0 } else { i };
        if (0..c).all(|k| !protos.present(row, k)) {
            return Err(FwsError::NoClasses);
        }
        for k in 0..c {
            if !protos.present(row, k) {
                mask[i * c + k] = T::of(ABSENT_LOGIT);
            }
        }
    }
    let e = ag::broadcast_to(&ag::reshape(embed, &[b, 1, m, hw]), &[b, c, m, hw]);
    let pr = ag::reshape(&protos.protos, &[p, c, m, 1]);
    let pr = if p == b { pr } else { ag::broadcast_to(&pr, &[b, c, m, 1]) };
    let diff = ag::sub_bcast(&e, &pr);
    let d2 = ag::sum_to(&ag::mul(&diff, &diff), &[b, c, 1, hw]);
    let dist = ag::powf(&ag::add_scalar(&d2, DIST_EPS), 0.5);
    let logits = ag::add_bcast(&ag::scale(&dist, -1.0), &Var::constant(Tensor::new(&[b, c, 1, 1], mask)));
    Ok(ag::log_softmax_channels(&ag::reshape(&logits, &[b, c, h, w])))
}

/// Batch indices `(query, prototype)` of the LCM expansion.
pub fn lcm_pairs(bq: usize, bs: usize) -> (Vec<usize>, Vec<usize>) {
    let l = lcm(bq, bs);
    ((0..l).map(|k| k % bq).collect(), (0..l).map(|k| k % bs).collect())
}

pub(crate) fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Expanded log-probabilities: query and prototype batches repeated to
/// `lcm(B_q, B_s)` and paired index-wise. Returns the expanded log map and
/// the query index of every expanded element.
pub fn lcm_expanded_log_probs<T: Real>(embed: &Var<T>, protos: &PrototypeSet<T>) -> Result<(Var<T>, Vec<usize>)> {
    let (qi, si) = lcm_pairs(embed.shape()[0], protos.batch());
    let e = ag::gather_rows(embed, &qi);
    let p = PrototypeSet {
        protos: ag::gather_rows(&protos.protos, &si),
        counts: si.iter().map(|&i| protos.counts[i].clone()).collect(),
    };
    Ok((proto_log_probs(&e, &p)?, qi))
}

/// Class probabilities for mismatched batches via LCM expansion, folded back
/// to the query batch by averaging over each query's repeats.
pub fn lcm_broadcast_probs<T: Real>(embed: &Var<T>, protos: &PrototypeSet<T>) -> Result<Var<T>> {
    let bq = embed.shape()[0];
    let (logp, qi) = lcm_expanded_log_probs(embed, protos)?;
    let reps = qi.len() / bq;
    Ok(ag::scale(&ag::scatter_add_rows(&ag::exp(&logp), &qi, bq), 1.0 / reps as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::LabelImage;

    fn embed(b: usize, m: usize, h: usize, w: usize, data: Vec<f64>) -> Var<f64> {
        Var::param(Tensor::new(&[b, m, h, w], data))
    }

    fn protos(p: usize, c: usize, m: usize, data: Vec<f64>) -> PrototypeSet<f64> {
        PrototypeSet { protos: Var::constant(Tensor::new(&[p, c, m], data)), counts: vec![vec![1; c]; p] }
    }

    #[test]
    fn single_and_pair_pixel_prototypes() {
        // M = 2, one image 1x3: pixels embed (1,4), (2,5), (3,6).
        let e = embed(1, 2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut y = LabelImage::unannotated(1, 3);
        y.set(0, 0, 1);
        y.set(0, 1, 2);
        y.set(0, 2, 2);
        let set = class_prototypes(&e, &[&y], 3).unwrap();
        let v = set.protos.value().data();
        assert_eq!(&v[2..4], &[1.0, 4.0]);
        assert_eq!(&v[4..6], &[2.5, 5.5]);
        assert_eq!(set.counts, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn micro_average_weights_by_count() {
        // Element A: three class-1 pixels at (1,0); element B: one class-1 pixel at (0,1).
        let e = embed(2, 2, 1, 3, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 9.0, 9.0, 1.0, 9.0, 9.0]);
        let a = LabelImage::from_fn(1, 3, |_, _| 1);
        let mut b = LabelImage::unannotated(1, 3);
        b.set(0, 0, 1);
        let set = avg_class_prototypes(&[(e.clone(), vec![&a, &b])], 2, Averaging::Micro).unwrap();
        let v = set.protos.value().data();
        assert!((v[2] - 0.75).abs() < 1e-12 && (v[3] - 0.25).abs() < 1e-12);
        let set = avg_class_prototypes(&[(e, vec![&a, &b])], 2, Averaging::Macro).unwrap();
        let v = set.protos.value().data();
        assert!((v[2] - 0.5).abs() < 1e-12 && (v[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn analytic_two_class_softmax() {
        let e = embed(1, 1, 1, 1, vec![0.0]);
        let p = protos(1, 2, 1, vec![0.0, 1.0]);
        let r = ag::exp(&proto_log_probs(&e, &p).unwrap());
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((r.value().data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn absent_class_gets_zero() {
        let e = embed(1, 1, 1, 2, vec![0.0, 5.0]);
        let mut p = protos(1, 3, 1, vec![0.0, 5.0, 2.0]);
        p.counts[0][2] = 0;
        let r = ag::exp(&proto_log_probs(&e, &p).unwrap());
        let d = r.value().data();
        assert_eq!(d[4], 0.0);
        assert_eq!(d[5], 0.0);
        p.counts[0] = vec![0, 0, 0];
        assert!(matches!(proto_log_probs(&e, &p), Err(FwsError::NoClasses)));
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let e = embed(2, 1, 1, 1, vec![0.0, 1.0]);
        let p = protos(3, 2, 1, vec![0.0; 6]);
        assert!(matches!(proto_log_probs(&e, &p), Err(FwsError::ProtoBatch { query: 2, support: 3 })));
        let r = lcm_broadcast_probs(&e, &p).unwrap();
        assert_eq!(r.shape(), &[2, 2, 1, 1]);
    }

    #[test]
    fn lcm_expansion_sizes() {
        assert_eq!(lcm_pairs(2, 3).0.len(), 6);
        assert_eq!(lcm_pairs(7, 5).0.len(), 35);
        assert_eq!(lcm_pairs(4, 4).0, vec![0, 1, 2, 3]);
    }
}
