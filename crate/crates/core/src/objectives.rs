//! Training objectives: weighted cross-entropy, the GE2E embedding loss with
//! the two TB classes acting as the "speakers", and their combination.
//!
//! Every objective exists in two forms: a pure scalar function (the
//! contract, also used as a cross-check) and a graph builder that wires the
//! same computation into an autodiff [`Graph`] for training.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Probability floor used when a predicted probability underflows to zero.
const LOG_FLOOR: f64 = 1e-300;

/// Per-class loss weights, indexed by [`Label::index`].
///
/// The under-sampled class gets weight 1; the over-sampled class gets its
/// count divided by the total count. With exactly balanced counts, TB (the
/// positive class) is treated as the under-sampled one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: [f64; 2],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights { weights: [1.0, 1.0] }
    }

    pub fn of(&self, label: Label) -> f64 {
        self.weights[label.index()]
    }
}

pub fn class_weights(labels: &[Label]) -> Result<ClassWeights> {
    let total = labels.len();
    let tb = labels.iter().filter(|l| **l == Label::Tb).count();
    let not_tb = total - tb;
    if tb == 0 || not_tb == 0 {
        return Err(Error::Objective(
            "class weights need both classes present".into(),
        ));
    }
    let mut weights = [1.0, 1.0];
    if tb > not_tb {
        weights[Label::Tb.index()] = tb as f64 / total as f64;
    } else {
        weights[Label::NotTb.index()] = not_tb as f64 / total as f64;
    }
    Ok(ClassWeights { weights })
}

/// Weighted cross-entropy of one sample: `-beta_y * log(yhat_y)`.
///
/// `yhat` must be a 2-class probability vector. A zero probability for the
/// true class is clamped and reported through the log facade.
pub fn weighted_ce(yhat: &[f64; 2], truth: Label, weights: &ClassWeights) -> Result<f64> {
    if yhat.iter().any(|&p| p < 0.0) || (yhat[0] + yhat[1] - 1.0).abs() > 1e-6 {
        return Err(Error::Objective(format!(
            "predicted vector {yhat:?} is not a probability distribution"
        )));
    }
    let mut p = yhat[truth.index()];
    if p <= 0.0 {
        log::warn!("true-class probability underflowed to {p}; clamping to {LOG_FLOOR}");
        p = LOG_FLOOR;
    }
    Ok(-weights.of(truth) * p.ln())
}

/// Mean weighted cross-entropy over a batch.
pub fn weighted_ce_batch(
    yhats: &[[f64; 2]],
    truths: &[Label],
    weights: &ClassWeights,
) -> Result<f64> {
    if yhats.len() != truths.len() || yhats.is_empty() {
        return Err(Error::Objective("batch size mismatch".into()));
    }
    let mut acc = 0.0;
    for (yhat, &truth) in yhats.iter().zip(truths) {
        acc += weighted_ce(yhat, truth, weights)?;
    }
    Ok(acc / yhats.len() as f64)
}

/// Learnable GE2E similarity scaling: `sim = scale * cos + offset`.
/// `scale` stays positive throughout training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ge2eParams {
    pub scale: f64,
    pub offset: f64,
}

impl Default for Ge2eParams {
    fn default() -> Self {
        // Conventional initialization for the softmax GE2E variant.
        Ge2eParams {
            scale: 10.0,
            offset: -5.0,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

/// GE2E loss (softmax variant), summed over every embedding in the batch.
///
/// Each embedding is scored against both class centroids by scaled cosine
/// similarity; its own class centroid excludes the embedding itself. The
/// per-embedding loss is `-log softmax` of the similarity to its own class.
/// Requires at least two embeddings per class.
pub fn ge2e_loss(embeddings: &[Vec<f64>], labels: &[Label], params: &Ge2eParams) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::Objective("embedding/label length mismatch".into()));
    }
    let dim = embeddings.first().map(|e| e.len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::Objective("empty embeddings".into()));
    }
    let mut counts = [0usize; 2];
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    for (e, &l) in embeddings.iter().zip(labels) {
        if e.len() != dim {
            return Err(Error::Objective("ragged embedding dimensions".into()));
        }
        counts[l.index()] += 1;
        for (s, v) in sums[l.index()].iter_mut().zip(e) {
            *s += v;
        }
    }
    if counts[0] < 2 || counts[1] < 2 {
        return Err(Error::Objective(format!(
            "GE2E needs at least 2 embeddings per class, got {counts:?}"
        )));
    }

    let centroids: Vec<Vec<f64>> = (0..2)
        .map(|j| sums[j].iter().map(|s| s / counts[j] as f64).collect())
        .collect();

    let mut loss = 0.0;
    for (e, &l) in embeddings.iter().zip(labels) {
        let own = l.index();
        let other = 1 - own;
        let loo: Vec<f64> = sums[own]
            .iter()
            .zip(e)
            .map(|(s, v)| (s - v) / (counts[own] - 1) as f64)
            .collect();
        let mut sims = [0.0; 2];
        sims[own] = params.scale * cosine(e, &loo) + params.offset;
        sims[other] = params.scale * cosine(e, &centroids[other]) + params.offset;
        let max = sims[0].max(sims[1]);
        let lse = max + ((sims[0] - max).exp() + (sims[1] - max).exp()).ln();
        loss += lse - sims[own];
    }
    Ok(loss)
}

/// Combined objective: mean weighted cross-entropy plus `alpha/B` times the
/// summed GE2E loss. Both terms are nonnegative quantities to minimize.
pub fn combined_loss(
    yhats: &[[f64; 2]],
    truths: &[Label],
    weights: &ClassWeights,
    embeddings: &[Vec<f64>],
    alpha: f64,
    ge2e: &Ge2eParams,
) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::Objective(format!("alpha {alpha} must be nonnegative")));
    }
    let ce = weighted_ce_batch(yhats, truths, weights)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    let g = ge2e_loss(embeddings, truths, ge2e)?;
    Ok(ce + alpha * g / yhats.len() as f64)
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Sum over the batch of `beta_y * (logsumexp(logits) - logit_y)`, the
/// weighted cross-entropy computed stably from logits. Shape `[1,1]`.
pub fn ce_from_logits_node(
    g: &mut Graph,
    logits: NodeId,
    truths: &[Label],
    weights: &ClassWeights,
) -> Result<NodeId> {
    let b = truths.len();
    let onehot = Tensor::new(
        vec![b, 2],
        truths.iter().flat_map(|l| l.one_hot()).collect(),
    )?;
    let beta = Tensor::new(
        vec![b, 1],
        truths.iter().map(|&l| weights.of(l)).collect(),
    )?;
    let onehot = g.constant(onehot);
    let beta = g.constant(beta);
    let lse = g.logsumexp_rows(logits)?;
    let picked = g.mul(logits, onehot)?;
    let true_logit = g.sum_cols(picked)?;
    let nll = g.sub(lse, true_logit)?;
    let weighted = g.mul(nll, beta)?;
    Ok(g.sum_all(weighted))
}

/// Summed GE2E loss over all embeddings, built from graph ops so the loss is
/// differentiable w.r.t. the embeddings and the (scale, offset) leaves.
pub fn ge2e_node(
    g: &mut Graph,
    embed: NodeId,
    truths: &[Label],
    scale: NodeId,
    offset: NodeId,
) -> Result<NodeId> {
    let by_class: [Vec<usize>; 2] = {
        let mut idx = [vec![], vec![]];
        for (i, l) in truths.iter().enumerate() {
            idx[l.index()].push(i);
        }
        idx
    };
    if by_class[0].len() < 2 || by_class[1].len() < 2 {
        return Err(Error::Objective(format!(
            "GE2E needs at least 2 embeddings per class, got [{}, {}]",
            by_class[0].len(),
            by_class[1].len()
        )));
    }

    let rows: Vec<NodeId> = (0..truths.len())
        .map(|i| g.slice_rows(embed, i, 1))
        .collect::<Result<_>>()?;

    let mut class_sum = Vec::with_capacity(2);
    let mut class_centroid = Vec::with_capacity(2);
    for members in &by_class {
        let stack: Vec<NodeId> = members.iter().map(|&i| rows[i]).collect();
        let cat = g.concat_rows(&stack)?;
        let sum = g.sum_rows(cat)?;
        class_sum.push(sum);
        class_centroid.push(g.scale(sum, 1.0 / members.len() as f64));
    }

    let cos_node = |g: &mut Graph, a: NodeId, b: NodeId| -> Result<NodeId> {
        let ab = g.mul(a, b)?;
        let dot = g.sum_cols(ab)?;
        let aa = g.mul(a, a)?;
        let na2 = g.sum_cols(aa)?;
        let bb = g.mul(b, b)?;
        let nb2 = g.sum_cols(bb)?;
        let prod = g.mul(na2, nb2)?;
        let norm = g.sqrt(prod);
        let denom = g.offset(norm, 1e-12);
        g.div(dot, denom)
    };

    let mut per_embedding = Vec::with_capacity(truths.len());
    for (i, &l) in truths.iter().enumerate() {
        let own = l.index();
        let other = 1 - own;
        let n_own = by_class[own].len() as f64;
        let diff = g.sub(class_sum[own], rows[i])?;
        let loo = g.scale(diff, 1.0 / (n_own - 1.0));

        let cos_own = cos_node(g, rows[i], loo)?;
        let cos_other = cos_node(g, rows[i], class_centroid[other])?;
        let scaled_own0 = g.mul(cos_own, scale)?;
        let sim_own = g.add(scaled_own0, offset)?;
        let scaled_other0 = g.mul(cos_other, scale)?;
        let sim_other = g.add(scaled_other0, offset)?;

        // Similarity row ordered by class index.
        let row = if own == 0 {
            g.concat_cols(&[sim_own, sim_other])?
        } else {
            g.concat_cols(&[sim_other, sim_own])?
        };
        let lse = g.logsumexp_rows(row)?;
        per_embedding.push(g.sub(lse, sim_own)?);
    }
    let all = g.concat_cols(&per_embedding)?;
    Ok(g.sum_all(all))
}

/// Combined loss node: `(ce_sum + alpha * ge2e_sum) / B`.
///
/// With `alpha == 0` the GE2E term is not built at all and the node reduces
/// to the weighted cross-entropy batch mean.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_node(
    g: &mut Graph,
    logits: NodeId,
    truths: &[Label],
    weights: &ClassWeights,
    embed: Option<NodeId>,
    alpha: f64,
    ge2e_scale: Option<NodeId>,
    ge2e_offset: Option<NodeId>,
) -> Result<NodeId> {
    if alpha < 0.0 {
        return Err(Error::Objective(format!("alpha {alpha} must be nonnegative")));
    }
    let b = truths.len() as f64;
    let ce_sum = ce_from_logits_node(g, logits, truths, weights)?;
    if alpha == 0.0 {
        return Ok(g.scale(ce_sum, 1.0 / b));
    }
    let (embed, scale, offset) = match (embed, ge2e_scale, ge2e_offset) {
        (Some(e), Some(s), Some(o)) => (e, s, o),
        _ => {
            return Err(Error::Objective(
                "alpha > 0 requires an embedding node and GE2E parameter leaves".into(),
            ))
        }
    };
    let ge2e_sum = ge2e_node(g, embed, truths, scale, offset)?;
    let scaled = g.scale(ge2e_sum, alpha);
    let total = g.add(ce_sum, scaled)?;
    Ok(g.scale(total, 1.0 / b))
}
