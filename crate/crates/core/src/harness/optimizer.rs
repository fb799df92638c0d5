//! Parameter-set optimizers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive moment estimation with standard defaults.
    Adam,
    /// Fixed-step gradient descent, kept for determinism comparisons.
    Sgd,
}

#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update. Parameters without a gradient entry are left
    /// untouched. Updated tensors are snapped to the `f32` grid so that
    /// in-memory parameters always match their checkpoint representation.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step_count += 1;
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in tensor.data_mut().iter_mut().zip(grad.data()) {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; tensor.numel()]);
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; tensor.numel()]);
                    let c1 = 1.0 - BETA1.powi(self.step_count as i32);
                    let c2 = 1.0 - BETA2.powi(self.step_count as i32);
                    for ((p, g), (m_i, v_i)) in tensor
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *m_i = BETA1 * *m_i + (1.0 - BETA1) * g;
                        *v_i = BETA2 * *v_i + (1.0 - BETA2) * g * g;
                        *p -= self.lr * (*m_i / c1) / ((*v_i / c2).sqrt() + EPS);
                    }
                }
            }
            tensor.round_to_f32();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grads(params: &ParamSet) -> BTreeMap<String, Tensor> {
        // d/dx of 0.5 * x^2 elementwise.
        let mut grads = BTreeMap::new();
        for (name, tensor) in params.iter() {
            grads.insert(name.clone(), tensor.clone());
        }
        grads
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::new(vec![1, 3], vec![5.0, -3.0, 2.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        for _ in 0..300 {
            let grads = quadratic_grads(&params);
            opt.step(&mut params, &grads).unwrap();
        }
        for v in params.get("x").unwrap().data() {
            assert!(v.abs() < 0.05, "failed to approach the minimum: {v}");
        }
    }

    #[test]
    fn updates_stay_on_the_f32_grid() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::new(vec![1, 2], vec![0.1, 0.7]).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1e-3);
        let grads = quadratic_grads(&params);
        opt.step(&mut params, &grads).unwrap();
        let t = params.get("x").unwrap().clone();
        let mut rounded = t.clone();
        rounded.round_to_f32();
        assert_eq!(t, rounded);
    }
}
