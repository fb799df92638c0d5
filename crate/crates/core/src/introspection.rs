//! Model introspection: idealized class inputs via input-space gradient
//! optimization against frozen weights, attention-weight traces over time,
//! and band-power summaries.

use serde::{Deserialize, Serialize};

use crate::dataset::{CoughSample, Label};
use crate::dsp::{FeatureMatrix, FeatureSpec};
use crate::error::{Error, Result};
use crate::models::{
    build_att_graph, build_bilstm_graph, att_forward, Batch, ForwardMode, TrainedModel,
};
use crate::tensor::{Bindings, EvalMode, Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DreamConfig {
    /// Number of frames of the idealized input.
    pub n_frames: usize,
    pub steps: usize,
    pub step_size: f64,
    pub target: Label,
    /// Optional L2 pull of the input toward zero.
    pub l2_pull: f64,
    pub seed: u64,
}

impl Default for DreamConfig {
    fn default() -> Self {
        DreamConfig {
            n_frames: 80,
            steps: 1000,
            step_size: 0.1,
            target: Label::Tb,
            l2_pull: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub step: usize,
    pub target_prob: f64,
}

#[derive(Debug, Clone)]
pub struct DreamResult {
    /// The optimized idealized input (best iterate by target probability).
    pub ideal: FeatureMatrix,
    /// Best-so-far target probability recorded every 10 steps.
    pub milestones: Vec<Milestone>,
    pub final_prob: f64,
    /// False when no step improved on the all-zeros initialization.
    pub improved: bool,
}

/// Early-exit threshold: optimization stops once the target probability is
/// essentially saturated.
const DREAM_SATURATION: f64 = 0.9995;

struct DreamGraph {
    graph: Graph,
    input_leaves: Vec<String>,
    d: usize,
}

fn build_dream_graph(
    model: &TrainedModel,
    n_frames: usize,
    target: Label,
    l2_pull: f64,
) -> Result<DreamGraph> {
    let d = model.input_dim();
    let (mut graph, logits, input_leaves) = match model {
        TrainedModel::Lr(lr) => {
            let mut g = Graph::new();
            let x = g.leaf("dream.x", &[n_frames, d])?;
            let w = g.constant(Tensor::new(vec![d, 1], lr.weights.clone())?);
            let z = g.matmul(x, w)?;
            let z = g.offset(z, lr.bias);
            let p = g.sigmoid(z);
            let cough_p = g.mean_all(p);
            // Express the cough probability as 2-class logits so the loss
            // path below is shared: log [1-p, p] acts like log-probs.
            let not_p = {
                let neg = g.neg(cough_p);
                g.offset(neg, 1.0)
            };
            let log_p = g.log(cough_p);
            let log_not = g.log(not_p);
            let logits = g.concat_cols(&[log_not, log_p])?;
            (g, logits, vec!["dream.x".to_string()])
        }
        TrainedModel::Bilstm(params) => {
            let fake = feature_template(n_frames, d)?;
            let batch = Batch::from_features(&[&fake])?;
            let built = build_bilstm_graph(params, &batch)?;
            let leaves = (0..n_frames).map(|t| format!("x{t}")).collect();
            (built.graph, built.logits, leaves)
        }
        TrainedModel::BilstmAtt(params) => {
            let fake = feature_template(n_frames, d)?;
            let batch = Batch::from_features(&[&fake])?;
            let built = build_att_graph(params, &batch)?;
            let leaves = (0..n_frames).map(|t| format!("x{t}")).collect();
            (built.graph, built.logits, leaves)
        }
    };

    // Cross-entropy toward the target one-hot, no class weights.
    let lse = graph.logsumexp_rows(logits)?;
    let target_logit = graph.slice_cols(logits, target.index(), 1)?;
    let mut loss = graph.sub(lse, target_logit)?;
    if l2_pull > 0.0 {
        let mut sq_sum: Option<NodeId> = None;
        for leaf in &input_leaves {
            let id = graph.leaf_id(leaf).expect("input leaf declared");
            let sq = graph.mul(id, id)?;
            let s = graph.sum_all(sq);
            sq_sum = Some(match sq_sum {
                None => s,
                Some(acc) => graph.add(acc, s)?,
            });
        }
        let penalty = graph.scale(sq_sum.unwrap(), l2_pull / (n_frames * d) as f64);
        loss = graph.add(loss, penalty)?;
    }
    graph.mark_output("dream_loss", loss);
    graph.mark_output("dream_logits", logits);
    Ok(DreamGraph {
        graph,
        input_leaves,
        d,
    })
}

fn feature_template(n_frames: usize, d: usize) -> Result<FeatureMatrix> {
    FeatureMatrix::new(
        vec![0.0; n_frames * d],
        n_frames,
        d,
        vec![],
        FeatureSpec {
            n_bins: d,
            ..FeatureSpec::default()
        },
    )
}

/// Synthesize an idealized input for the target class: starting from all
/// zeros, take gradient steps on the frozen model's classification loss.
/// Model weights are untouched (taken by shared reference); dropout is
/// disabled throughout. Deterministic.
///
/// `bin_centers` (possibly empty) and `spec` describe the feature geometry
/// the model was trained on and are attached to the returned matrix.
pub fn dream(
    model: &TrainedModel,
    cfg: &DreamConfig,
    spec: &FeatureSpec,
    bin_centers: Vec<f64>,
) -> Result<DreamResult> {
    if cfg.n_frames == 0 {
        return Err(Error::Introspection("n_frames must be at least 1".into()));
    }
    if !(cfg.step_size > 0.0) {
        return Err(Error::Introspection("step_size must be positive".into()));
    }
    let mut dg = build_dream_graph(model, cfg.n_frames, cfg.target, cfg.l2_pull)?;
    let d = dg.d;
    let n = cfg.n_frames;

    let mut x = vec![0.0f64; n * d];
    let mut best_x = x.clone();
    let mut milestones = Vec::new();

    let bind = |bindings: &mut Bindings, x: &[f64], leaves: &[String]| {
        if leaves.len() == 1 {
            bindings.bind(
                leaves[0].clone(),
                Tensor::new(vec![n, d], x.to_vec()).unwrap().with_grad(),
            );
        } else {
            for (t, leaf) in leaves.iter().enumerate() {
                bindings.bind(
                    leaf.clone(),
                    Tensor::new(vec![1, d], x[t * d..(t + 1) * d].to_vec())
                        .unwrap()
                        .with_grad(),
                );
            }
        }
    };
    let target_prob = |outs: &std::collections::BTreeMap<String, Tensor>| -> f64 {
        let logits = &outs["dream_logits"];
        let (a, b) = (logits.at(0, 0), logits.at(0, 1));
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let p_tb = eb / (ea + eb);
        match cfg.target {
            Label::Tb => p_tb,
            Label::NotTb => 1.0 - p_tb,
        }
    };

    let mut bindings = Bindings::new();
    if let Some(params) = match model {
        TrainedModel::Bilstm(p) => Some(&p.params),
        TrainedModel::BilstmAtt(p) => Some(&p.params),
        TrainedModel::Lr(_) => None,
    } {
        params.bind_into(&mut bindings, false);
    }
    bind(&mut bindings, &x, &dg.input_leaves);
    let outs = dg.graph.evaluate(&bindings, EvalMode::Eval)?;
    let init_prob = target_prob(&outs);
    let mut best_prob = init_prob;
    milestones.push(Milestone {
        step: 0,
        target_prob: best_prob,
    });

    // Adam over the input only.
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; n * d];
    let mut v = vec![0.0; n * d];
    for step in 1..=cfg.steps {
        let grads = dg.graph.backward("dream_loss")?;
        let mut flat = vec![0.0; n * d];
        if dg.input_leaves.len() == 1 {
            flat.copy_from_slice(grads[&dg.input_leaves[0]].data());
        } else {
            for (t, leaf) in dg.input_leaves.iter().enumerate() {
                flat[t * d..(t + 1) * d].copy_from_slice(grads[leaf].data());
            }
        }
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        for i in 0..n * d {
            m[i] = b1 * m[i] + (1.0 - b1) * flat[i];
            v[i] = b2 * v[i] + (1.0 - b2) * flat[i] * flat[i];
            x[i] -= cfg.step_size * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }

        bind(&mut bindings, &x, &dg.input_leaves);
        let outs = dg.graph.evaluate(&bindings, EvalMode::Eval)?;
        let prob = target_prob(&outs);
        if prob > best_prob {
            best_prob = prob;
            best_x.copy_from_slice(&x);
        }
        if step % 10 == 0 {
            // Milestones record the best-so-far iterate, which makes the
            // recorded curve non-decreasing by construction.
            milestones.push(Milestone {
                step,
                target_prob: best_prob,
            });
        }
        if best_prob >= DREAM_SATURATION {
            if step % 10 != 0 {
                milestones.push(Milestone {
                    step,
                    target_prob: best_prob,
                });
            }
            break;
        }
    }

    let ideal = FeatureMatrix::new(best_x, n, d, bin_centers, spec.clone())?;
    Ok(DreamResult {
        ideal,
        milestones,
        final_prob: best_prob,
        improved: best_prob > init_prob + 1e-12,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// One weight per true frame; they sum to 1.
    pub weights: Vec<f64>,
    /// Frame timestamps in seconds (frame index x hop / sample rate).
    pub timestamps: Vec<f64>,
    pub clip_path: String,
}

/// Attention weights of a trained attention model over one sample's frames.
pub fn attention_trace(model: &TrainedModel, sample: &CoughSample) -> Result<AttentionTrace> {
    let TrainedModel::BilstmAtt(params) = model else {
        return Err(Error::Introspection(format!(
            "attention traces need the bilstm-att architecture, got {}",
            model.arch()
        )));
    };
    let out = att_forward(params, &[&sample.features], ForwardMode::Eval)?;
    let weights = out.attention[0].clone();
    let period = sample.features.spec.frame_period_s();
    let timestamps = (0..weights.len()).map(|i| i as f64 * period).collect();
    Ok(AttentionTrace {
        weights,
        timestamps,
        clip_path: sample.clip_path.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPower {
    pub bin: usize,
    pub center_hz: Option<f64>,
    pub mean_power: f64,
}

/// Mean feature value over the frame axis for each selected bin.
pub fn band_power_summary(features: &FeatureMatrix, bins: &[usize]) -> Result<Vec<BandPower>> {
    if bins.is_empty() {
        return Err(Error::Introspection("empty bin subset".into()));
    }
    let n = features.n_frames() as f64;
    bins.iter()
        .map(|&bin| {
            if bin >= features.n_bins() {
                return Err(Error::Introspection(format!(
                    "bin {bin} out of range 0..{}",
                    features.n_bins()
                )));
            }
            let mean = (0..features.n_frames())
                .map(|f| features.at(f, bin))
                .sum::<f64>()
                / n;
            Ok(BandPower {
                bin,
                center_hz: features.bin_centers().get(bin).copied(),
                mean_power: mean,
            })
        })
        .collect()
}
