//! Classification and bag-of-words reconstruction losses.

use candle_core::{Tensor, D};

use crate::nn::log_softmax_rows;
use crate::{Error, Result};

/// Guard inside the logarithm of predicted probabilities.
pub const LOG_EPS: f64 = 1e-12;

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn hard_cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, m) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::DimMismatch {
            what: "labels per batch",
            expected: b,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= m) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            classes: m,
        });
    }
    let idx = Tensor::from_slice(labels, (b, 1), logits.device())?;
    let picked = log_softmax_rows(logits)?.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Mean over the batch of `-sum_k target_k * log(predicted_k + eps)`.
pub fn soft_cross_entropy(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    if predicted.dims() != target.dims() || predicted.rank() != 2 {
        return Err(Error::DimMismatch {
            what: "predicted vs target distribution",
            expected: target.dims().last().copied().unwrap_or(0),
            got: predicted.dims().last().copied().unwrap_or(0),
        });
    }
    let log_p = (predicted + LOG_EPS)?.log()?;
    let per_sample = (target * log_p)?.sum(D::Minus1)?;
    Ok(per_sample.mean_all()?.neg()?)
}

/// Shannon entropy (nats) of each row, averaged over rows.
pub fn mean_entropy(dist: &Tensor) -> Result<Tensor> {
    soft_cross_entropy(dist, dist)
}
