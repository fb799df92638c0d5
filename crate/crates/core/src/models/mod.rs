//! The three classifiers (logistic regression, BiLSTM, BiLSTM-Att) and
//! shared parameter/checkpoint handling.

mod attention;
mod bilstm;
mod checkpoint;
mod lr;

pub use attention::{att_forward, build_att_graph, AttOutput, AttParams};
pub use bilstm::{bilstm_forward, build_bilstm_graph, BilstmOutput, BilstmParams, BuiltGraph};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use lr::{lr_fit, lr_predict_cough, pool_frames, LrModel};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Bindings, EvalMode, Tensor};

/// Per-direction LSTM hidden size.
pub const HIDDEN_DIM: usize = 32;
/// Size of the concatenated bidirectional summary `q`.
pub const Q_DIM: usize = 2 * HIDDEN_DIM;
/// Hidden width of the feed-forward head.
pub const HEAD_DIM: usize = 32;
/// Default keep-probability of the dropout before the first linear layer.
pub const DEFAULT_DROPOUT_KEEP: f64 = 0.5;

/// Model architecture tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Lr,
    Bilstm,
    BilstmAtt,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::Lr => "lr",
            Arch::Bilstm => "bilstm",
            Arch::BilstmAtt => "bilstm-att",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(Arch::Lr),
            "bilstm" => Ok(Arch::Bilstm),
            "bilstm-att" => Ok(Arch::BilstmAtt),
            other => Err(Error::Model(format!(
                "unknown architecture {other:?} (expected lr | bilstm | bilstm-att)"
            ))),
        }
    }
}

/// Named tensor bundle with deterministic iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Bind every parameter to its graph leaf.
    pub fn bind_into(&self, bindings: &mut Bindings, with_grad: bool) {
        for (name, tensor) in &self.map {
            let t = if with_grad {
                tensor.clone().with_grad()
            } else {
                tensor.clone()
            };
            bindings.bind(name.clone(), t);
        }
    }

    /// Snap every parameter to the `f32` grid (see checkpoint format).
    pub fn round_to_f32_grid(&mut self) {
        for tensor in self.map.values_mut() {
            tensor.round_to_f32();
        }
    }
}

/// Padded variable-length batch: `T` step tensors of shape `[B, d]` plus the
/// true length of each sample.
#[derive(Debug, Clone)]
pub struct Batch {
    pub steps: Vec<Tensor>,
    pub lengths: Vec<usize>,
    pub b: usize,
    pub t: usize,
    pub d: usize,
}

impl Batch {
    pub fn from_features(features: &[&FeatureMatrix]) -> Result<Batch> {
        if features.is_empty() {
            return Err(Error::Model("empty batch".into()));
        }
        let d = features[0].n_bins();
        let mut lengths = Vec::with_capacity(features.len());
        for f in features {
            if f.n_bins() != d {
                return Err(Error::Model(format!(
                    "feature width mismatch in batch: {} vs {d}",
                    f.n_bins()
                )));
            }
            if f.n_frames() == 0 {
                return Err(Error::Model("zero-length sample in batch".into()));
            }
            lengths.push(f.n_frames());
        }
        let b = features.len();
        let t = *lengths.iter().max().unwrap();
        let mut steps = Vec::with_capacity(t);
        for step in 0..t {
            let mut data = vec![0.0; b * d];
            for (row, f) in features.iter().enumerate() {
                if step < f.n_frames() {
                    data[row * d..(row + 1) * d].copy_from_slice(f.frame(step));
                }
            }
            steps.push(Tensor::new(vec![b, d], data)?);
        }
        Ok(Batch {
            steps,
            lengths,
            b,
            t,
            d,
        })
    }

    /// Bind step tensors to their `x{t}` leaves.
    pub fn bind_into(&self, bindings: &mut Bindings) {
        for (t, step) in self.steps.iter().enumerate() {
            bindings.bind(format!("x{t}"), step.clone());
        }
    }

    /// Row-major `[B, T]` validity mask.
    pub fn mask_bools(&self) -> Vec<bool> {
        let mut mask = vec![false; self.b * self.t];
        for (row, &len) in self.lengths.iter().enumerate() {
            for t in 0..len {
                mask[row * self.t + t] = true;
            }
        }
        mask
    }
}

/// Forward-pass mode for the recurrent models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    Train { dropout_seed: u64 },
    Eval,
}

impl ForwardMode {
    pub(crate) fn eval_mode(self) -> EvalMode {
        match self {
            ForwardMode::Train { dropout_seed } => EvalMode::Train { dropout_seed },
            ForwardMode::Eval => EvalMode::Eval,
        }
    }
}

/// Softmax over a 2-logit row; returns the TB (index 1) probability.
pub(crate) fn tb_probability(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

/// Any trained classifier, for ensembling and introspection.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Lr(LrModel),
    Bilstm(BilstmParams),
    BilstmAtt(AttParams),
}

impl TrainedModel {
    pub fn arch(&self) -> Arch {
        match self {
            TrainedModel::Lr(_) => Arch::Lr,
            TrainedModel::Bilstm(_) => Arch::Bilstm,
            TrainedModel::BilstmAtt(_) => Arch::BilstmAtt,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TrainedModel::Lr(m) => m.weights.len(),
            TrainedModel::Bilstm(m) => m.input_dim,
            TrainedModel::BilstmAtt(m) => m.input_dim,
        }
    }

    /// TB probability per sample, evaluation mode.
    pub fn predict_proba(&self, features: &[&FeatureMatrix]) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Lr(m) => features.iter().map(|f| lr_predict_cough(m, f)).collect(),
            TrainedModel::Bilstm(m) => {
                let out = bilstm_forward(m, features, ForwardMode::Eval)?;
                Ok(out.probs_tb)
            }
            TrainedModel::BilstmAtt(m) => {
                let out = att_forward(m, features, ForwardMode::Eval)?;
                Ok(out.probs_tb)
            }
        }
    }

    pub fn to_checkpoint(&self, epoch: u32, fold: u32, seed: u64) -> Checkpoint {
        let (arch, params) = match self {
            TrainedModel::Lr(m) => (Arch::Lr, m.to_params()),
            TrainedModel::Bilstm(m) => (Arch::Bilstm, m.params.clone()),
            TrainedModel::BilstmAtt(m) => (Arch::BilstmAtt, m.params.clone()),
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch,
            epoch,
            fold,
            seed,
            params,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dropout_keep: f64) -> Result<TrainedModel> {
        match ckpt.arch {
            Arch::Lr => Ok(TrainedModel::Lr(LrModel::from_params(&ckpt.params)?)),
            Arch::Bilstm => Ok(TrainedModel::Bilstm(BilstmParams::from_checkpoint(
                ckpt,
                dropout_keep,
            )?)),
            Arch::BilstmAtt => Ok(TrainedModel::BilstmAtt(AttParams::from_checkpoint(
                ckpt,
                dropout_keep,
            )?)),
        }
    }
}
