//! Frame-level logistic regression baseline.
//!
//! Each frame of a cough is an independent training example; a cough's
//! probability is the average of its frame probabilities, which discards
//! temporal information by construction.

use crate::dataset::{CoughSample, Label};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct LrModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LrModel {
    pub fn predict_frame(&self, frame: &[f64]) -> f64 {
        let z = self.bias
            + self
                .weights
                .iter()
                .zip(frame)
                .map(|(w, x)| w * x)
                .sum::<f64>();
        crate::tensor::sigmoid_scalar(z)
    }

    pub fn to_params(&self) -> ParamSet {
        let mut params = ParamSet::new();
        params.insert(
            "lr.weights",
            Tensor::new(vec![self.weights.len(), 1], self.weights.clone()).expect("shape"),
        );
        params.insert("lr.bias", Tensor::scalar(self.bias));
        params
    }

    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let w = params.get("lr.weights")?;
        let b = params.get("lr.bias")?;
        Ok(LrModel {
            weights: w.data().to_vec(),
            bias: b.item()?,
        })
    }
}

/// Pool every frame of every cough into one design matrix with per-frame
/// labels.
pub fn pool_frames(samples: &[CoughSample]) -> Result<(Tensor, Vec<Label>)> {
    if samples.is_empty() {
        return Err(Error::Model("no samples to pool".into()));
    }
    let d = samples[0].features.n_bins();
    let n: usize = samples.iter().map(|s| s.features.n_frames()).sum();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for s in samples {
        if s.features.n_bins() != d {
            return Err(Error::Model("feature width mismatch across samples".into()));
        }
        data.extend_from_slice(s.features.values());
        labels.extend(std::iter::repeat(s.label).take(s.features.n_frames()));
    }
    Ok((Tensor::new(vec![n, d], data)?, labels))
}

/// Fit by regularized maximum likelihood: full-batch adaptive-moment descent
/// on standardized columns with an L2 penalty, then fold the
/// standardization back into the raw-space weights. The objective is convex
/// and the start point fixed, so the fit is deterministic.
pub fn lr_fit(frames: &Tensor, labels: &[Label], l2: f64) -> Result<LrModel> {
    let n = frames.rows();
    let d = frames.cols();
    if labels.len() != n || n == 0 {
        return Err(Error::Model("frame/label length mismatch".into()));
    }
    let pos = labels.iter().filter(|l| **l == Label::Tb).count();
    if pos == 0 || pos == n {
        return Err(Error::Model(
            "logistic regression needs both classes present".into(),
        ));
    }
    if l2 < 0.0 {
        return Err(Error::Model("l2 strength must be nonnegative".into()));
    }

    // Column standardization for conditioning.
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += frames.at(i, j);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for i in 0..n {
        for j in 0..d {
            let v = frames.at(i, j) - mean[j];
            sd[j] += v * v;
        }
    }
    for s in &mut sd {
        *s = (*s / n as f64).sqrt().max(1e-12);
    }

    let y: Vec<f64> = labels.iter().map(|l| l.index() as f64).collect();
    let mut theta = vec![0.0; d];
    let mut bias = 0.0;

    // Adam, full batch.
    let (b1, b2, eps, lr): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.1);
    let mut m_t = vec![0.0; d + 1];
    let mut v_t = vec![0.0; d + 1];
    let mut grad = vec![0.0; d + 1];
    for step in 1..=500usize {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let mut z = bias;
            let row = &frames.data()[i * d..(i + 1) * d];
            for j in 0..d {
                z += theta[j] * (row[j] - mean[j]) / sd[j];
            }
            let err = crate::tensor::sigmoid_scalar(z) - y[i];
            for j in 0..d {
                grad[j] += err * (row[j] - mean[j]) / sd[j];
            }
            grad[d] += err;
        }
        for g in grad.iter_mut() {
            *g /= n as f64;
        }
        // The L2 penalty applies to the raw-space weights theta/sd.
        for j in 0..d {
            grad[j] += l2 * theta[j] / (sd[j] * sd[j] * n as f64);
        }

        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < 1e-9 {
            break;
        }
        let correction1 = 1.0 - b1.powi(step as i32);
        let correction2 = 1.0 - b2.powi(step as i32);
        for j in 0..=d {
            m_t[j] = b1 * m_t[j] + (1.0 - b1) * grad[j];
            v_t[j] = b2 * v_t[j] + (1.0 - b2) * grad[j] * grad[j];
            let update = lr * (m_t[j] / correction1) / ((v_t[j] / correction2).sqrt() + eps);
            if j < d {
                theta[j] -= update;
            } else {
                bias -= update;
            }
        }
    }

    // Fold standardization back: w = theta / sd, b = bias - sum(w * mean).
    let weights: Vec<f64> = theta.iter().zip(&sd).map(|(t, s)| t / s).collect();
    let bias = bias - weights.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>();
    Ok(LrModel { weights, bias })
}

/// Cough probability: the mean of the per-frame probabilities.
pub fn lr_predict_cough(model: &LrModel, features: &FeatureMatrix) -> Result<f64> {
    if features.n_bins() != model.weights.len() {
        return Err(Error::Model(format!(
            "feature width {} does not match model dimension {}",
            features.n_bins(),
            model.weights.len()
        )));
    }
    let mut acc = 0.0;
    for f in 0..features.n_frames() {
        acc += model.predict_frame(features.frame(f));
    }
    Ok(acc / features.n_frames() as f64)
}
