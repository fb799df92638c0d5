//! BiLSTM with attention pooling.
//!
//! The bidirectional summary `q`, after a learned linear projection, acts as
//! the query against each step's concatenated BiLSTM output. Scores are
//! scaled dot products, softmaxed over each sample's true steps (padded
//! steps get exactly zero weight), and the weighted average `e` feeds the
//! head. `e` is also the embedding the GE2E objective regularizes, so the
//! GE2E scale/offset live in this parameter set and ride along in
//! checkpoints.

use rand_chacha::ChaCha20Rng;

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::objectives::Ge2eParams;
use crate::tensor::{Bindings, Tensor};

use super::bilstm::{build_head, build_trunk, init_head_params, init_lstm_params};
use super::{tb_probability, Arch, Batch, BuiltGraph, Checkpoint, ForwardMode, ParamSet, Q_DIM};

/// BiLSTM-Att parameters: the BiLSTM set plus the attention query projection
/// and the GE2E similarity scale/offset.
#[derive(Debug, Clone)]
pub struct AttParams {
    pub params: ParamSet,
    pub input_dim: usize,
    pub dropout_keep: f64,
}

impl AttParams {
    pub fn init(input_dim: usize, dropout_keep: f64, rng: &mut ChaCha20Rng) -> Self {
        let mut params = ParamSet::new();
        init_lstm_params(&mut params, input_dim, rng);
        init_head_params(&mut params, rng);
        let bound = 1.0 / (Q_DIM as f64).sqrt();
        params.insert(
            "att.w_q",
            Tensor::rand_uniform(&[Q_DIM, Q_DIM], -bound, bound, rng),
        );
        let ge2e = Ge2eParams::default();
        params.insert("ge2e.scale", Tensor::scalar(ge2e.scale));
        params.insert("ge2e.offset", Tensor::scalar(ge2e.offset));
        AttParams {
            params,
            input_dim,
            dropout_keep,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dropout_keep: f64) -> Result<Self> {
        if ckpt.arch != Arch::BilstmAtt {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint is {}, expected bilstm-att",
                ckpt.arch
            )));
        }
        let input_dim = ckpt.params.get("lstm.fwd.w_x")?.shape()[0];
        ckpt.params.get("att.w_q")?;
        Ok(AttParams {
            params: ckpt.params.clone(),
            input_dim,
            dropout_keep,
        })
    }

    pub fn ge2e(&self) -> Result<Ge2eParams> {
        Ok(Ge2eParams {
            scale: self.params.get("ge2e.scale")?.item()?,
            offset: self.params.get("ge2e.offset")?.item()?,
        })
    }
}

/// Build the attention forward graph for one batch shape. Marks `logits`,
/// `q`, `embed` and `att` outputs.
pub fn build_att_graph(params: &AttParams, batch: &Batch) -> Result<BuiltGraph> {
    let mut g = Graph::new();
    let trunk = build_trunk(&mut g, batch, params.input_dim)?;
    let w_q = g.leaf("att.w_q", &[Q_DIM, Q_DIM])?;
    // GE2E parameter leaves are declared here so training can differentiate
    // through them; plain forward passes bind them without grad.
    g.leaf("ge2e.scale", &[1, 1])?;
    g.leaf("ge2e.offset", &[1, 1])?;

    let query = g.matmul(trunk.q, w_q)?;
    let scale = 1.0 / (Q_DIM as f64).sqrt();

    let mut step_outputs = Vec::with_capacity(batch.t);
    let mut scores = Vec::with_capacity(batch.t);
    for t in 0..batch.t {
        let o_t = g.concat_cols(&[trunk.fwd_states[t], trunk.bwd_states[batch.t - 1 - t]])?;
        let prod = g.mul(query, o_t)?;
        let dot = g.sum_cols(prod)?;
        scores.push(g.scale(dot, scale));
        step_outputs.push(o_t);
    }
    let score_row = g.concat_cols(&scores)?;
    let att = g.masked_softmax_rows(score_row, batch.mask_bools())?;

    let mut embed = None;
    for (t, &o_t) in step_outputs.iter().enumerate() {
        let w_t = g.slice_cols(att, t, 1)?;
        let contrib = g.mul_col(o_t, w_t)?;
        embed = Some(match embed {
            None => contrib,
            Some(acc) => g.add(acc, contrib)?,
        });
    }
    let embed = embed.expect("at least one step");

    let logits = build_head(&mut g, embed, params.dropout_keep)?;
    g.mark_output("logits", logits);
    g.mark_output("q", trunk.q);
    g.mark_output("embed", embed);
    g.mark_output("att", att);
    Ok(BuiltGraph {
        graph: g,
        logits,
        q: trunk.q,
        embed: Some(embed),
        att: Some(att),
    })
}

use crate::tensor::Graph;

#[derive(Debug, Clone)]
pub struct AttOutput {
    pub logits: Vec<[f64; 2]>,
    pub probs_tb: Vec<f64>,
    pub q: Tensor,
    /// Attention-pooled embedding, `[B, 64]`.
    pub embed: Tensor,
    /// Attention weights over each sample's true steps.
    pub attention: Vec<Vec<f64>>,
}

/// Forward pass over a batch of variable-length feature matrices.
pub fn att_forward(
    params: &AttParams,
    features: &[&FeatureMatrix],
    mode: ForwardMode,
) -> Result<AttOutput> {
    let batch = Batch::from_features(features)?;
    let mut built = build_att_graph(params, &batch)?;
    let mut bindings = Bindings::new();
    params.params.bind_into(&mut bindings, false);
    batch.bind_into(&mut bindings);
    let out = built.graph.evaluate(&bindings, mode.eval_mode())?;

    let logits_t = &out["logits"];
    let logits: Vec<[f64; 2]> = (0..batch.b)
        .map(|i| [logits_t.at(i, 0), logits_t.at(i, 1)])
        .collect();
    let probs_tb = logits.iter().map(|&l| tb_probability(l)).collect();
    let att_t = &out["att"];
    let attention = batch
        .lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| (0..len).map(|t| att_t.at(i, t)).collect())
        .collect();
    Ok(AttOutput {
        logits,
        probs_tb,
        q: out["q"].clone(),
        embed: out["embed"].clone(),
        attention,
    })
}
