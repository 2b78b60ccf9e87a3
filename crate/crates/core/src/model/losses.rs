//! Training objectives, as graph nodes and as plain functions.

use super::network::MoeNodes;
use crate::diff::{Graph, NodeId, Tensor};
use crate::error::{GradError, Result};

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(GradError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(GradError::Empty("loss input"));
    }
    Ok(())
}

/// `(1/T) sum_t (pred_t - target_t)^2`.
pub fn policy_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(predicted, target)?;
    Ok(predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predicted.len() as f64)
}

/// Same uniform-mean MSE, applied to value predictions.
pub fn value_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    policy_loss(predicted, target)
}

/// `sum_r w_r (pred_r - target_r)^2 / count` where `count` is the number of
/// rows with nonzero weight. Zero-weight rows contribute nothing.
pub fn weighted_mse(g: &mut Graph, pred: NodeId, target: &[f64], weights: &[f64]) -> Result<NodeId> {
    let [rows, cols] = g.shape(pred);
    if cols != 1 || target.len() != rows || weights.len() != rows {
        return Err(GradError::ShapeMismatch {
            op: "weighted_mse",
            left: [rows, cols],
            right: [target.len(), 1],
        });
    }
    let count = weights.iter().filter(|&&w| w != 0.0).count();
    if count == 0 {
        return Err(GradError::Empty("unmasked rows"));
    }
    let t = g.constant(Tensor::column(target));
    let diff = g.sub(pred, t)?;
    let sq = g.square(diff);
    let w = g.constant(Tensor::column(weights));
    let sq = g.mul(sq, w)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / count as f64))
}

/// `lambda_aux * M * sum_m u_m p_m + (1 - lambda_aux) * mean ||h - h_shared||^2`
/// over the unmasked rows. Usage shares `u_m` are constants; the mean
/// probabilities `p_m` carry gradient to the router.
pub fn balance_loss_node(
    g: &mut Graph,
    moe: &MoeNodes,
    hidden: NodeId,
    mask: &[bool],
    lambda_aux: f64,
) -> Result<NodeId> {
    let [rows, m] = g.shape(moe.probs);
    let count = mask.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(GradError::Empty("routing batch"));
    }
    let n = count as f64;
    let mut usage = vec![0.0; m];
    for r in (0..rows).filter(|&r| mask[r]) {
        usage[moe.chosen[r]] += 1.0 / n;
    }
    let avg: Vec<f64> = mask.iter().map(|&v| if v { 1.0 / n } else { 0.0 }).collect();
    let avg = g.constant(Tensor::row(&avg));
    let mean_p = g.matmul(avg, moe.probs)?;
    let usage = g.constant(Tensor::row(&usage));
    let prod = g.mul(mean_p, usage)?;
    let aux = g.sum(prod);
    let aux = g.scale(aux, m as f64);

    let diff = g.sub(hidden, moe.shared)?;
    let col: Vec<f64> = mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let col = g.constant(Tensor::column(&col));
    let diff = g.mul_col(diff, col)?;
    let sq = g.square(diff);
    let anchor = g.sum(sq);
    let anchor = g.scale(anchor, 1.0 / n);

    let a = g.scale(aux, lambda_aux);
    let b = g.scale(anchor, 1.0 - lambda_aux);
    g.add(a, b)
}

/// Mean over sequences and candidates of the cosine between each candidate's
/// refined-action sequence and the nominal action sequence. Padding rows are
/// zeroed first so they do not enter any dot product or norm. The nominal
/// actions enter as constants.
pub fn diversity_loss_node(
    g: &mut Graph,
    refined: NodeId,
    nominal: &[f64],
    mask: &[bool],
    seq: usize,
) -> Result<NodeId> {
    if nominal.len() != mask.len() {
        return Err(GradError::LengthMismatch {
            left: nominal.len(),
            right: mask.len(),
        });
    }
    let col: Vec<f64> = mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let col = g.constant(Tensor::column(&col));
    let r = g.mul_col(refined, col)?;
    let masked: Vec<f64> = nominal
        .iter()
        .zip(mask)
        .map(|(&a, &v)| if v { a } else { 0.0 })
        .collect();
    let nominal = g.constant(Tensor::column(&masked));
    let cos = g.segment_cosine(r, nominal, seq)?;
    Ok(g.mean(cos))
}
