//! Pixel-wise cross-entropies over log-probability maps.

use crate::autograd::{self as ag, Real, Tensor, Var};
use crate::error::{FwsError, Result};
use crate::image::{Grid, UNANNOTATED};

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;

/// `ln(max(p, LOG_EPS))` for a probability map.
pub fn clamped_log<T: Real>(probs: &Var<T>) -> Var<T> {
    ag::ln(&ag::clamp_min(probs, LOG_EPS))
}

/// Normalization of the sparse cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceNorm {
    /// Divide by all pixels of the image.
    #[default]
    AllPixels,
    /// Divide by the annotated pixels of the image.
    Annotated,
}

/// Constant weight tensor `w` such that `sum(w * log_probs)` is the loss.
fn loss_weights<T: Real>(shape: &[usize], labels: &[&Grid<u8>], norm: SceNorm) -> Result<Tensor<T>> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if labels.len() != b {
        return Err(FwsError::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    let hw = h * w;
    let mut out = vec![T::zero(); b * c * hw];
    for (i, y) in labels.iter().enumerate() {
        if y.dims() != (h, w) {
            return Err(FwsError::Shape(format!("label {}x{} vs prediction {h}x{w}", y.height(), y.width())));
        }
        let denom = match norm {
            SceNorm::AllPixels => hw,
            SceNorm::Annotated => y.annotated_count().max(1),
        };
        let wt = T::of(-1.0 / (denom * b) as f64);
        for (j, &v) in y.pixels().iter().enumerate() {
            if v == UNANNOTATED {
                continue;
            }
            let v = v as usize;
            if v >= c {
                return Err(FwsError::range("label value", format!("{v} for {c} classes")));
            }
            out[(i * c + v) * hw + j] = wt;
        }
    }
    Ok(Tensor::new(shape, out))
}

/// Sparse cross-entropy: unannotated pixels contribute nothing, the sum is
/// divided per `norm` and averaged over the batch.
pub fn sce_loss<T: Real>(log_probs: &Var<T>, sparse: &[&Grid<u8>], norm: SceNorm) -> Result<Var<T>> {
    let w = loss_weights(log_probs.shape(), sparse, norm)?;
    Ok(ag::sum_all(&ag::mul_const(log_probs, &w)))
}

/// Dense cross-entropy averaged over pixels and batch.
pub fn ce_loss<T: Real>(log_probs: &Var<T>, dense: &[&Grid<u8>]) -> Result<Var<T>> {
    if dense.iter().any(|y| y.pixels().contains(&UNANNOTATED)) {
        return Err(FwsError::range("dense label", "contains the unannotated sentinel"));
    }
    sce_loss(log_probs, dense, SceNorm::AllPixels)
}
