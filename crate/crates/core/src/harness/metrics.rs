//! Threshold-free and thresholded classification metrics.
//!
//! TB is the positive class throughout; a sample is called positive when its
//! score is greater than or equal to the decision threshold.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub auc: f64,
}

fn validate_scores(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Metric("score/label length mismatch".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let pos = labels.iter().filter(|l| **l == Label::Tb).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(
            "metrics need both classes present".into(),
        ));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via midranks: ties contribute half-concordance,
/// which is exactly the trapezoidal rule over the ROC curve.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = validate_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Midranks over ties.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the midrank.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == Label::Tb {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// One ROC operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Candidate thresholds in ascending order: one below every score, the
/// midpoints between distinct consecutive scores, and one above every score.
fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let span = (distinct[distinct.len() - 1] - distinct[0]).max(1.0);
    let mut out = Vec::with_capacity(distinct.len() + 1);
    out.push(distinct[0] - 0.5 * span);
    for w in distinct.windows(2) {
        out.push((w[0] + w[1]) / 2.0);
    }
    out.push(distinct[distinct.len() - 1] + 0.5 * span);
    out
}

/// ROC curve rows `(threshold, fpr, tpr)`, thresholds descending so the
/// curve runs from (0,0) to (1,1).
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = validate_scores(scores, labels)?;
    let mut points = Vec::new();
    for &t in candidate_thresholds(scores).iter().rev() {
        let mut tp = 0;
        let mut fp = 0;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                match l {
                    Label::Tb => tp += 1,
                    Label::NotTb => fp += 1,
                }
            }
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Equal-error-rate threshold.
///
/// FPR falls and FNR rises as the threshold sweeps upward; the two step
/// curves are linearly interpolated between adjacent operating points and
/// the crossing defines `(gamma, eer)`. `gamma` is clamped to `[0,1]` for
/// probability scores.
pub fn eer_threshold(scores: &[f64], labels: &[Label]) -> Result<(f64, f64)> {
    let (pos, neg) = validate_scores(scores, labels)?;
    let thresholds = candidate_thresholds(scores);

    let rates = |t: f64| -> (f64, f64) {
        let mut fp = 0;
        let mut fne = 0;
        for (&s, &l) in scores.iter().zip(labels) {
            match l {
                Label::NotTb if s >= t => fp += 1,
                Label::Tb if s < t => fne += 1,
                _ => {}
            }
        }
        (fp as f64 / neg as f64, fne as f64 / pos as f64)
    };

    let mut prev_t = thresholds[0];
    let (mut prev_fpr, mut prev_fnr) = rates(prev_t);
    for &t in &thresholds[1..] {
        let (fpr, fnr) = rates(t);
        if fnr >= fpr {
            let (gamma, eer) = if (fnr - fpr).abs() < f64::EPSILON {
                (t, fpr)
            } else if prev_fnr >= prev_fpr {
                // Crossed before the first candidate (degenerate); take it.
                (prev_t, (prev_fpr + prev_fnr) / 2.0)
            } else {
                let denom = (fnr - prev_fnr) - (fpr - prev_fpr);
                let lambda = (prev_fpr - prev_fnr) / denom;
                (
                    prev_t + lambda * (t - prev_t),
                    prev_fpr + lambda * (fpr - prev_fpr),
                )
            };
            return Ok((gamma.clamp(0.0, 1.0), eer));
        }
        prev_t = t;
        prev_fpr = fpr;
        prev_fnr = fnr;
    }
    // FNR reaches 1 and FPR reaches 0 at the top candidate, so the crossing
    // always exists.
    unreachable!("EER crossing not found");
}

/// Confusion-matrix metrics at threshold `gamma` plus the threshold-free
/// AUC.
pub fn evaluate(scores: &[f64], labels: &[Label], gamma: f64) -> Result<Metrics> {
    validate_scores(scores, labels)?;
    let (mut tp, mut tn, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (l, s >= gamma) {
            (Label::Tb, true) => tp += 1,
            (Label::Tb, false) => fne += 1,
            (Label::NotTb, true) => fp += 1,
            (Label::NotTb, false) => tn += 1,
        }
    }
    Ok(Metrics {
        sensitivity: tp as f64 / (tp + fne) as f64,
        specificity: tn as f64 / (tn + fp) as f64,
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        auc: roc_auc(scores, labels)?,
    })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;

    /// Exhaustive pairwise-concordance oracle for the AUC.
    pub fn auc_pairwise_oracle(scores: &[f64], labels: &[Label]) -> f64 {
        let mut concordant = 0.0;
        let mut pairs = 0.0;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            for (j, (&sj, &lj)) in scores.iter().zip(labels).enumerate() {
                if i == j || li != Label::Tb || lj != Label::NotTb {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    concordant += 1.0;
                } else if si == sj {
                    concordant += 0.5;
                }
            }
        }
        concordant / pairs
    }

    /// Exhaustive threshold-sweep oracle for the EER: rates recomputed from
    /// scratch at every candidate, crossing interpolated the same way.
    pub fn eer_sweep_oracle(scores: &[f64], labels: &[Label]) -> (f64, f64) {
        let pos = labels.iter().filter(|l| **l == Label::Tb).count() as f64;
        let neg = labels.len() as f64 - pos;
        let mut cands: Vec<f64> = scores.to_vec();
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cands.dedup();
        let span = (cands[cands.len() - 1] - cands[0]).max(1.0);
        let mut thresholds = vec![cands[0] - 0.5 * span];
        for w in cands.windows(2) {
            thresholds.push((w[0] + w[1]) / 2.0);
        }
        thresholds.push(cands[cands.len() - 1] + 0.5 * span);

        let mut prev: Option<(f64, f64, f64)> = None;
        for &t in &thresholds {
            let fp = scores
                .iter()
                .zip(labels)
                .filter(|(&s, &l)| l == Label::NotTb && s >= t)
                .count() as f64;
            let fnr_count = scores
                .iter()
                .zip(labels)
                .filter(|(&s, &l)| l == Label::Tb && s < t)
                .count() as f64;
            let (fpr, fnr) = (fp / neg, fnr_count / pos);
            if fnr >= fpr {
                return match prev {
                    None => (t.clamp(0.0, 1.0), (fpr + fnr) / 2.0),
                    Some((pt, pfpr, pfnr)) => {
                        if (fnr - fpr).abs() < f64::EPSILON {
                            (t.clamp(0.0, 1.0), fpr)
                        } else {
                            let denom = (fnr - pfnr) - (fpr - pfpr);
                            let lambda = (pfpr - pfnr) / denom;
                            (
                                (pt + lambda * (t - pt)).clamp(0.0, 1.0),
                                pfpr + lambda * (fpr - pfpr),
                            )
                        }
                    }
                };
            }
            prev = Some((t, fpr, fnr));
        }
        unreachable!()
    }

    fn labels_pm(spec: &[(f64, bool)]) -> (Vec<f64>, Vec<Label>) {
        let scores = spec.iter().map(|(s, _)| *s).collect();
        let labels = spec
            .iter()
            .map(|(_, p)| if *p { Label::Tb } else { Label::NotTb })
            .collect();
        (scores, labels)
    }

    #[test]
    fn perfect_separation_has_zero_eer_and_mid_threshold() {
        let (scores, labels) = labels_pm(&[
            (0.1, false),
            (0.2, false),
            (0.3, false),
            (0.7, true),
            (0.8, true),
        ]);
        let (gamma, eer) = eer_threshold(&scores, &labels).unwrap();
        assert_eq!(eer, 0.0);
        assert!(gamma > 0.3 && gamma < 0.7, "gamma {gamma}");
    }

    #[test]
    fn random_scores_give_eer_near_half() {
        let mut rng = crate::rng::stream(31, "eer", 0);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<Label> = (0..n)
            .map(|_| if rng.gen::<bool>() { Label::Tb } else { Label::NotTb })
            .collect();
        let (_, eer) = eer_threshold(&scores, &labels).unwrap();
        assert!((eer - 0.5).abs() < 0.05, "eer {eer}");
    }

    #[test]
    fn four_point_case_matches_the_sweep_oracle() {
        let (scores, labels) = labels_pm(&[(0.1, false), (0.4, false), (0.35, true), (0.8, true)]);
        let (gamma, eer) = eer_threshold(&scores, &labels).unwrap();
        let (og, oe) = eer_sweep_oracle(&scores, &labels);
        assert!((gamma - og).abs() < 1e-12, "{gamma} vs {og}");
        assert!((eer - oe).abs() < 1e-12, "{eer} vs {oe}");
    }

    #[test]
    fn auc_matches_pairwise_oracle_on_handmade_case() {
        let (scores, labels) = labels_pm(&[
            (0.12, false),
            (0.3, true),
            (0.3, false),
            (0.41, false),
            (0.55, true),
            (0.55, true),
            (0.6, false),
            (0.77, true),
            (0.92, true),
            (0.92, false),
        ]);
        let fast = roc_auc(&scores, &labels).unwrap();
        let slow = auc_pairwise_oracle(&scores, &labels);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn trapezoid_over_roc_curve_equals_rank_auc() {
        let mut rng = crate::rng::stream(32, "roc", 0);
        let scores: Vec<f64> = (0..60).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
        let labels: Vec<Label> = (0..60)
            .map(|i| {
                if rng.gen::<f64>() < 0.3 + 0.4 * ((i % 2) as f64) {
                    Label::Tb
                } else {
                    Label::NotTb
                }
            })
            .collect();
        if !labels.contains(&Label::Tb) || !labels.contains(&Label::NotTb) {
            return;
        }
        let curve = roc_curve(&scores, &labels).unwrap();
        let mut area = 0.0;
        for w in curve.windows(2) {
            area += (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0;
        }
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!((area - auc).abs() < 1e-12, "trapezoid {area} vs rank {auc}");
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let mut rng = crate::rng::stream(33, "monotone", 0);
        let scores: Vec<f64> = (0..40).map(|_| rng.gen_range(0.01..0.99)).collect();
        let labels: Vec<Label> = (0..40)
            .map(|_| if rng.gen::<bool>() { Label::Tb } else { Label::NotTb })
            .collect();
        let base = roc_auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| s.powi(3) * 2.0 + 1.0).collect();
        let logit: Vec<f64> = scores.iter().map(|s| (s / (1.0 - s)).ln()).collect();
        assert!((roc_auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
        assert!((roc_auc(&logit, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn evaluate_perfect_ranking_is_all_ones() {
        let (scores, labels) = labels_pm(&[(0.1, false), (0.2, false), (0.8, true), (0.9, true)]);
        let m = evaluate(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.sensitivity, 1.0);
        assert_eq!(m.specificity, 1.0);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.auc, 1.0);
    }

    #[test]
    fn evaluate_inverted_ranking_has_zero_auc() {
        let (scores, labels) = labels_pm(&[(0.9, false), (0.8, false), (0.2, true), (0.1, true)]);
        let m = evaluate(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.auc, 0.0);
    }

    #[test]
    fn threshold_extremes_pin_sensitivity_and_specificity() {
        let mut rng = crate::rng::stream(34, "extremes", 0);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<Label> = (0..30)
            .map(|i| if i % 3 == 0 { Label::Tb } else { Label::NotTb })
            .collect();
        let at_zero = evaluate(&scores, &labels, 0.0).unwrap();
        assert_eq!(at_zero.sensitivity, 1.0);
        let above_one = evaluate(&scores, &labels, 1.0 + 1e-9).unwrap();
        assert_eq!(above_one.specificity, 1.0);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(roc_auc(&[0.3, 0.4], &[Label::Tb, Label::Tb]).is_err());
        assert!(eer_threshold(&[0.3, 0.4], &[Label::NotTb, Label::NotTb]).is_err());
    }
}
