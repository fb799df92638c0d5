//! Bidirectional LSTM classifier.
//!
//! The batch is processed in lockstep over padded steps; per-sample validity
//! masks freeze the recurrent state past each sample's true length, so the
//! forward-direction final state is taken at the true last frame and padding
//! never leaks into predictions. The backward direction runs over the
//! globally reversed padded block: masked steps at the front leave the state
//! at its zero initialization until real frames begin, which reproduces the
//! unpadded backward pass exactly.

use rand_chacha::ChaCha20Rng;

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Bindings, Graph, NodeId, Tensor};

use super::{
    tb_probability, Arch, Batch, Checkpoint, ForwardMode, ParamSet, HEAD_DIM, HIDDEN_DIM, Q_DIM,
};

/// BiLSTM parameters: per-direction gate weights, feed-forward head, and the
/// dropout keep-probability applied before the first linear layer.
#[derive(Debug, Clone)]
pub struct BilstmParams {
    pub params: ParamSet,
    pub input_dim: usize,
    pub dropout_keep: f64,
}

/// Gate blocks are laid out `[input, forget, cell, output]`, each
/// `HIDDEN_DIM` wide.
pub(crate) fn init_lstm_params(
    params: &mut ParamSet,
    input_dim: usize,
    rng: &mut ChaCha20Rng,
) {
    let h = HIDDEN_DIM;
    for dir in ["fwd", "bwd"] {
        let bx = 1.0 / (input_dim as f64).sqrt();
        let bh = 1.0 / (h as f64).sqrt();
        params.insert(
            format!("lstm.{dir}.w_x"),
            Tensor::rand_uniform(&[input_dim, 4 * h], -bx, bx, rng),
        );
        params.insert(
            format!("lstm.{dir}.w_h"),
            Tensor::rand_uniform(&[h, 4 * h], -bh, bh, rng),
        );
        let mut bias = Tensor::zeros(&[1, 4 * h]);
        // Forget-gate bias starts at 1 so early training retains memory.
        for v in &mut bias.data_mut()[h..2 * h] {
            *v = 1.0;
        }
        params.insert(format!("lstm.{dir}.b"), bias);
    }
}

pub(crate) fn init_head_params(params: &mut ParamSet, rng: &mut ChaCha20Rng) {
    let b1 = 1.0 / (Q_DIM as f64).sqrt();
    let b2 = 1.0 / (HEAD_DIM as f64).sqrt();
    params.insert(
        "head.w1",
        Tensor::rand_uniform(&[Q_DIM, HEAD_DIM], -b1, b1, rng),
    );
    params.insert("head.b1", Tensor::zeros(&[1, HEAD_DIM]));
    params.insert(
        "head.w2",
        Tensor::rand_uniform(&[HEAD_DIM, 2], -b2, b2, rng),
    );
    params.insert("head.b2", Tensor::zeros(&[1, 2]));
}

impl BilstmParams {
    pub fn init(input_dim: usize, dropout_keep: f64, rng: &mut ChaCha20Rng) -> Self {
        let mut params = ParamSet::new();
        init_lstm_params(&mut params, input_dim, rng);
        init_head_params(&mut params, rng);
        BilstmParams {
            params,
            input_dim,
            dropout_keep,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dropout_keep: f64) -> Result<Self> {
        if ckpt.arch != Arch::Bilstm {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint is {}, expected bilstm",
                ckpt.arch
            )));
        }
        let input_dim = ckpt.params.get("lstm.fwd.w_x")?.shape()[0];
        Ok(BilstmParams {
            params: ckpt.params.clone(),
            input_dim,
            dropout_keep,
        })
    }
}

/// A built forward graph with handles to its interesting nodes. Outputs are
/// also marked by name: `logits`, `q`, and for the attention variant `embed`
/// and `att`.
pub struct BuiltGraph {
    pub graph: Graph,
    pub logits: NodeId,
    pub q: NodeId,
    pub embed: Option<NodeId>,
    pub att: Option<NodeId>,
}

/// Run one LSTM direction over `steps` (already in processing order).
/// Returns the per-step hidden states, in processing order.
pub(crate) fn run_direction(
    g: &mut Graph,
    steps: &[NodeId],
    masks: &[Tensor],
    dir: &str,
    b: usize,
) -> Result<Vec<NodeId>> {
    let h = HIDDEN_DIM;
    let w_x = g.leaf_id(&format!("lstm.{dir}.w_x")).expect("declared");
    let w_h = g.leaf_id(&format!("lstm.{dir}.w_h")).expect("declared");
    let bias = g.leaf_id(&format!("lstm.{dir}.b")).expect("declared");

    let mut h_prev = g.constant(Tensor::zeros(&[b, h]));
    let mut c_prev = g.constant(Tensor::zeros(&[b, h]));
    let mut states = Vec::with_capacity(steps.len());

    for (t, &x_t) in steps.iter().enumerate() {
        let xw = g.matmul(x_t, w_x)?;
        let hw = g.matmul(h_prev, w_h)?;
        let pre = g.add(xw, hw)?;
        let gates = g.add_row(pre, bias)?;

        let i_gate = {
            let s = g.slice_cols(gates, 0, h)?;
            g.sigmoid(s)
        };
        let f_gate = {
            let s = g.slice_cols(gates, h, h)?;
            g.sigmoid(s)
        };
        let cand = {
            let s = g.slice_cols(gates, 2 * h, h)?;
            g.tanh(s)
        };
        let o_gate = {
            let s = g.slice_cols(gates, 3 * h, h)?;
            g.sigmoid(s)
        };

        let keep = g.mul(f_gate, c_prev)?;
        let write = g.mul(i_gate, cand)?;
        let c_cand = g.add(keep, write)?;
        let c_tanh = g.tanh(c_cand);
        let h_cand = g.mul(o_gate, c_tanh)?;

        // Freeze state on padded steps: s = s_prev + m * (s_cand - s_prev).
        let mask = g.constant(masks[t].clone());
        let c_delta = g.sub(c_cand, c_prev)?;
        let c_masked = g.mul_col(c_delta, mask)?;
        let c_t = g.add(c_prev, c_masked)?;
        let h_delta = g.sub(h_cand, h_prev)?;
        let h_masked = g.mul_col(h_delta, mask)?;
        let h_t = g.add(h_prev, h_masked)?;

        states.push(h_t);
        h_prev = h_t;
        c_prev = c_t;
    }
    Ok(states)
}

/// Shared trunk: declares parameter and input leaves, runs both directions,
/// and produces `q` plus the per-step states of each direction.
pub(crate) struct Trunk {
    pub fwd_states: Vec<NodeId>,
    /// Processing order of the reversed block; original step `t` lives at
    /// index `T - 1 - t`.
    pub bwd_states: Vec<NodeId>,
    pub q: NodeId,
}

pub(crate) fn build_trunk(g: &mut Graph, batch: &Batch, input_dim: usize) -> Result<Trunk> {
    if batch.d != input_dim {
        return Err(Error::Model(format!(
            "batch width {} does not match model input dim {input_dim}",
            batch.d
        )));
    }
    let h = HIDDEN_DIM;
    for dir in ["fwd", "bwd"] {
        g.leaf(format!("lstm.{dir}.w_x"), &[input_dim, 4 * h])?;
        g.leaf(format!("lstm.{dir}.w_h"), &[h, 4 * h])?;
        g.leaf(format!("lstm.{dir}.b"), &[1, 4 * h])?;
    }
    let steps: Vec<NodeId> = (0..batch.t)
        .map(|t| g.leaf(format!("x{t}"), &[batch.b, batch.d]))
        .collect::<Result<_>>()?;

    let fwd_masks: Vec<Tensor> = (0..batch.t)
        .map(|t| {
            let data = batch
                .lengths
                .iter()
                .map(|&len| if t < len { 1.0 } else { 0.0 })
                .collect();
            Tensor::new(vec![batch.b, 1], data)
        })
        .collect::<Result<_>>()?;
    let bwd_steps: Vec<NodeId> = (0..batch.t).map(|t| steps[batch.t - 1 - t]).collect();
    let bwd_masks: Vec<Tensor> = (0..batch.t)
        .map(|t| fwd_masks[batch.t - 1 - t].clone())
        .collect();

    let fwd_states = run_direction(g, &steps, &fwd_masks, "fwd", batch.b)?;
    let bwd_states = run_direction(g, &bwd_steps, &bwd_masks, "bwd", batch.b)?;

    // Forward summary froze at each sample's last true frame; the backward
    // pass ends at original frame 0.
    let q = g.concat_cols(&[fwd_states[batch.t - 1], bwd_states[batch.t - 1]])?;
    Ok(Trunk {
        fwd_states,
        bwd_states,
        q,
    })
}

/// Feed-forward head: dropout, 64->32 linear, ReLU, 32->2 linear.
pub(crate) fn build_head(g: &mut Graph, input: NodeId, dropout_keep: f64) -> Result<NodeId> {
    let w1 = g.leaf("head.w1", &[Q_DIM, HEAD_DIM])?;
    let b1 = g.leaf("head.b1", &[1, HEAD_DIM])?;
    let w2 = g.leaf("head.w2", &[HEAD_DIM, 2])?;
    let b2 = g.leaf("head.b2", &[1, 2])?;

    let dropped = g.dropout(input, dropout_keep)?;
    let z1 = g.matmul(dropped, w1)?;
    let z1 = g.add_row(z1, b1)?;
    let a1 = g.relu(z1);
    let z2 = g.matmul(a1, w2)?;
    let logits = g.add_row(z2, b2)?;
    Ok(logits)
}

/// Build the BiLSTM forward graph for one batch shape.
pub fn build_bilstm_graph(params: &BilstmParams, batch: &Batch) -> Result<BuiltGraph> {
    let mut g = Graph::new();
    let trunk = build_trunk(&mut g, batch, params.input_dim)?;
    let logits = build_head(&mut g, trunk.q, params.dropout_keep)?;
    g.mark_output("logits", logits);
    g.mark_output("q", trunk.q);
    Ok(BuiltGraph {
        graph: g,
        logits,
        q: trunk.q,
        embed: None,
        att: None,
    })
}

#[derive(Debug, Clone)]
pub struct BilstmOutput {
    pub logits: Vec<[f64; 2]>,
    pub probs_tb: Vec<f64>,
    pub q: Tensor,
}

/// Forward pass over a batch of variable-length feature matrices.
pub fn bilstm_forward(
    params: &BilstmParams,
    features: &[&FeatureMatrix],
    mode: ForwardMode,
) -> Result<BilstmOutput> {
    let batch = Batch::from_features(features)?;
    let mut built = build_bilstm_graph(params, &batch)?;
    let mut bindings = Bindings::new();
    params.params.bind_into(&mut bindings, false);
    batch.bind_into(&mut bindings);
    let out = built.graph.evaluate(&bindings, mode.eval_mode())?;
    let logits_t = &out["logits"];
    let logits: Vec<[f64; 2]> = (0..batch.b)
        .map(|i| [logits_t.at(i, 0), logits_t.at(i, 1)])
        .collect();
    let probs_tb = logits.iter().map(|&l| tb_probability(l)).collect();
    Ok(BilstmOutput {
        logits,
        probs_tb,
        q: out["q"].clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{FeatureMatrix, FeatureSpec};
    use crate::rng;
    use rand::Rng;

    pub(crate) fn random_features(seed: u64, n_frames: usize, d: usize) -> FeatureMatrix {
        let mut r = rng::stream(seed, "bilstm-test", 0);
        let values = (0..n_frames * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let spec = FeatureSpec {
            n_bins: d,
            ..FeatureSpec::default()
        };
        FeatureMatrix::new(values, n_frames, d, vec![], spec).unwrap()
    }

    #[test]
    fn padding_does_not_leak_into_predictions() {
        let d = 6;
        let mut r = rng::stream(1, "pad", 0);
        let params = BilstmParams::init(d, 0.5, &mut r);
        let target = random_features(10, 5, d);
        let alone = bilstm_forward(&params, &[&target], ForwardMode::Eval).unwrap();

        // Same sample inside a batch padded to length 12 by longer peers.
        let others: Vec<FeatureMatrix> = (0..7)
            .map(|i| random_features(20 + i, 12, d))
            .collect();
        let mut batch: Vec<&FeatureMatrix> = vec![&target];
        batch.extend(others.iter());
        let batched = bilstm_forward(&params, &batch, ForwardMode::Eval).unwrap();

        for k in 0..2 {
            assert!(
                (alone.logits[0][k] - batched.logits[0][k]).abs() < 1e-5,
                "logit {k}: {} vs {}",
                alone.logits[0][k],
                batched.logits[0][k]
            );
        }
    }

    #[test]
    fn zero_input_with_zero_biases_gives_head_bias_logits() {
        let d = 4;
        let mut r = rng::stream(2, "zero", 0);
        let mut params = BilstmParams::init(d, 0.5, &mut r);
        // Zero all biases, including the forget gate.
        for dir in ["fwd", "bwd"] {
            let b = params.params.get_mut(&format!("lstm.{dir}.b")).unwrap();
            for v in b.data_mut() {
                *v = 0.0;
            }
        }
        let head_bias = {
            let b2 = params.params.get_mut("head.b2").unwrap();
            b2.data_mut()[0] = 0.31;
            b2.data_mut()[1] = -0.12;
            [0.31, -0.12]
        };
        let spec = FeatureSpec {
            n_bins: d,
            ..FeatureSpec::default()
        };
        let zero = FeatureMatrix::new(vec![0.0; 3 * d], 3, d, vec![], spec).unwrap();
        let out = bilstm_forward(&params, &[&zero], ForwardMode::Eval).unwrap();
        // Zero input and zero biases force every gate product to zero, so q
        // stays zero and the logits equal the head output bias (the hidden
        // ReLU sees only head.b1 = 0).
        for v in out.q.data() {
            assert_eq!(*v, 0.0);
        }
        assert!((out.logits[0][0] - head_bias[0]).abs() < 1e-12);
        assert!((out.logits[0][1] - head_bias[1]).abs() < 1e-12);
    }

    #[test]
    fn reversed_frame_order_changes_logits() {
        // Recurrent models must be sensitive to temporal order on an input
        // crafted with distinct frames.
        let d = 5;
        let mut r = rng::stream(3, "order", 0);
        let params = BilstmParams::init(d, 0.5, &mut r);
        let feats = random_features(30, 8, d);
        let reversed = {
            let mut values = Vec::with_capacity(feats.values().len());
            for f in (0..feats.n_frames()).rev() {
                values.extend_from_slice(feats.frame(f));
            }
            FeatureMatrix::new(values, feats.n_frames(), d, vec![], feats.spec.clone()).unwrap()
        };
        let a = bilstm_forward(&params, &[&feats], ForwardMode::Eval).unwrap();
        let b = bilstm_forward(&params, &[&reversed], ForwardMode::Eval).unwrap();
        let diff = (a.logits[0][0] - b.logits[0][0]).abs();
        assert!(diff > 1e-6, "logits insensitive to order: diff {diff}");
    }

    #[test]
    fn every_parameter_gradient_matches_finite_differences() {
        use crate::objectives::{ce_from_logits_node, ClassWeights};
        use crate::tensor::{grad_check, Bindings, EvalMode};

        let d = 3;
        let mut r = rng::stream(40, "gradcheck", 0);
        let params = BilstmParams::init(d, 0.5, &mut r);
        let feats = [random_features(41, 3, d), random_features(42, 2, d)];
        let refs: Vec<&FeatureMatrix> = feats.iter().collect();
        let batch = Batch::from_features(&refs).unwrap();
        let mut built = build_bilstm_graph(&params, &batch).unwrap();
        let truths = [crate::dataset::Label::Tb, crate::dataset::Label::NotTb];
        let loss = ce_from_logits_node(
            &mut built.graph,
            built.logits,
            &truths,
            &ClassWeights::uniform(),
        )
        .unwrap();
        built.graph.mark_output("loss", loss);

        let mut bindings = Bindings::new();
        params.params.bind_into(&mut bindings, true);
        batch.bind_into(&mut bindings);
        for name in params.params.names() {
            let err = grad_check(
                &mut built.graph,
                &bindings,
                name,
                "loss",
                1e-5,
                EvalMode::Eval,
            )
            .unwrap();
            assert!(err < 1e-3, "parameter {name}: grad error {err}");
        }
    }

    #[test]
    fn checkpoint_arch_mismatch_is_rejected() {
        let mut r = rng::stream(4, "arch", 0);
        let params = BilstmParams::init(3, 0.5, &mut r);
        let ckpt = Checkpoint {
            version: super::super::CHECKPOINT_VERSION,
            arch: Arch::BilstmAtt,
            epoch: 0,
            fold: 0,
            seed: 0,
            params: params.params.clone(),
        };
        assert!(BilstmParams::from_checkpoint(&ckpt, 0.5).is_err());
    }
}
