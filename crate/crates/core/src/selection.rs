//! Greedy sequential forward search over feature bins.
//!
//! Each round trains the configured architecture on every candidate bin set
//! `S + {b}` (restricted by column masking, so features are extracted once)
//! and adds the bin with the highest cross-validated mean dev AUC. The
//! search stops at `max_bins` or after `patience` rounds without improving
//! on the best score seen so far.

use serde::{Deserialize, Serialize};

use crate::dataset::{RawClip, SplitPlan};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::harness::{
    epoch_batches, predict_scores, roc_auc, select_epoch, Optimizer, TrainConfig,
};
use crate::models::{Arch, AttParams, BilstmParams, TrainedModel};
use crate::objectives::class_weights;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfsConfig {
    pub max_bins: usize,
    /// Rounds without improvement tolerated before stopping.
    pub patience: usize,
    /// Reduced epoch budget per candidate evaluation.
    pub epochs: usize,
}

impl Default for SfsConfig {
    fn default() -> Self {
        SfsConfig {
            max_bins: 32,
            patience: 3,
            epochs: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxBins,
    Patience,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfsStep {
    pub bin: usize,
    pub mean_dev_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfsTrace {
    pub steps: Vec<SfsStep>,
    pub selected: Vec<usize>,
    pub stop: StopReason,
}

/// Greedy forward search over `n_bins` candidates with an arbitrary subset
/// scorer. A scorer returning a non-finite value disqualifies that
/// candidate for the round (it is skipped and logged).
pub fn sfs_with_scorer(
    n_bins: usize,
    mut scorer: impl FnMut(&[usize]) -> Result<f64>,
    max_bins: usize,
    patience: usize,
) -> Result<SfsTrace> {
    if max_bins == 0 || max_bins > n_bins {
        return Err(Error::Selection(format!(
            "max_bins {max_bins} must lie in 1..={n_bins}"
        )));
    }
    if patience == 0 {
        return Err(Error::Selection("patience must be at least 1".into()));
    }

    let mut selected: Vec<usize> = Vec::new();
    let mut steps = Vec::new();
    let mut best_so_far = f64::NEG_INFINITY;
    let mut stale_rounds = 0;
    let stop;

    loop {
        if selected.len() == max_bins {
            stop = StopReason::MaxBins;
            break;
        }
        let mut round_best: Option<(usize, f64)> = None;
        for bin in 0..n_bins {
            if selected.contains(&bin) {
                continue;
            }
            let mut candidate = selected.clone();
            candidate.push(bin);
            candidate.sort_unstable();
            let score = scorer(&candidate)?;
            if !score.is_finite() {
                log::warn!("SFS: candidate bin {bin} scored {score}; skipped");
                continue;
            }
            let better = match round_best {
                None => true,
                Some((_, s)) => score > s,
            };
            if better {
                round_best = Some((bin, score));
            }
        }
        let Some((bin, score)) = round_best else {
            stop = StopReason::Exhausted;
            break;
        };
        selected.push(bin);
        steps.push(SfsStep {
            bin,
            mean_dev_auc: score,
        });
        if score > best_so_far {
            best_so_far = score;
            stale_rounds = 0;
        } else {
            stale_rounds += 1;
            if stale_rounds >= patience {
                stop = StopReason::Patience;
                break;
            }
        }
    }

    Ok(SfsTrace {
        steps,
        selected,
        stop,
    })
}

/// Cross-validated scorer: train the configured recurrent architecture on
/// the candidate bins over every fold with a reduced epoch budget; the score
/// is the best mean dev AUC over epochs (the full epoch-selection protocol).
///
/// `features` holds the full-width training-side features, extracted once;
/// candidates are column masks over them.
pub struct CvScorer<'a> {
    pub train_feats: Vec<&'a FeatureMatrix>,
    pub train_labels: Vec<crate::dataset::Label>,
    pub fold_of_train: Vec<usize>,
    pub dev_feats: Vec<&'a FeatureMatrix>,
    pub dev_labels: Vec<crate::dataset::Label>,
    pub fold_of_dev: Vec<usize>,
    pub k_folds: usize,
    pub cfg: TrainConfig,
    pub sfs_epochs: usize,
}

impl<'a> CvScorer<'a> {
    /// Assemble the scorer from a prepared split plan. Training features are
    /// the unaugmented clips of each fold's train side (augmentation would
    /// multiply an already quadratic search).
    pub fn from_plan(
        prep: &'a crate::harness::PreparedCorpus,
        plan: &SplitPlan,
        cfg: &TrainConfig,
        sfs: &SfsConfig,
    ) -> Result<Self> {
        let mut s = CvScorer {
            train_feats: vec![],
            train_labels: vec![],
            fold_of_train: vec![],
            dev_feats: vec![],
            dev_labels: vec![],
            fold_of_dev: vec![],
            k_folds: plan.folds.len(),
            cfg: cfg.clone(),
            sfs_epochs: sfs.epochs,
        };
        for fold in 0..plan.folds.len() {
            let train_patients = plan.fold_train_patients(fold);
            let dev_patients = plan.dev_patients(fold);
            for clip in &prep.clips {
                if train_patients.contains(&clip.patient_id) {
                    s.train_feats.push(&clip.base);
                    s.train_labels.push(clip.label);
                    s.fold_of_train.push(fold);
                } else if dev_patients.contains(&clip.patient_id) {
                    s.dev_feats.push(&clip.base);
                    s.dev_labels.push(clip.label);
                    s.fold_of_dev.push(fold);
                }
            }
        }
        Ok(s)
    }

    /// Mean dev AUC of the candidate bin set, maximized over epochs.
    pub fn score(&self, bins: &[usize]) -> Result<f64> {
        let mut fold_aucs: Vec<Vec<f64>> = Vec::with_capacity(self.k_folds);
        for fold in 0..self.k_folds {
            let train: Vec<FeatureMatrix> = self
                .train_feats
                .iter()
                .zip(&self.fold_of_train)
                .filter(|(_, &f)| f == fold)
                .map(|(feats, _)| feats.restrict_bins(bins))
                .collect::<Result<_>>()?;
            let train_labels: Vec<_> = self
                .train_labels
                .iter()
                .zip(&self.fold_of_train)
                .filter(|(_, &f)| f == fold)
                .map(|(&l, _)| l)
                .collect();
            let dev: Vec<FeatureMatrix> = self
                .dev_feats
                .iter()
                .zip(&self.fold_of_dev)
                .filter(|(_, &f)| f == fold)
                .map(|(feats, _)| feats.restrict_bins(bins))
                .collect::<Result<_>>()?;
            let dev_labels: Vec<_> = self
                .dev_labels
                .iter()
                .zip(&self.fold_of_dev)
                .filter(|(_, &f)| f == fold)
                .map(|(&l, _)| l)
                .collect();

            let aucs = self.train_candidate(fold, bins, &train, &train_labels, &dev, &dev_labels)?;
            fold_aucs.push(aucs);
        }
        let selected = select_epoch(&fold_aucs)?;
        Ok(fold_aucs.iter().map(|f| f[selected]).sum::<f64>() / self.k_folds as f64)
    }

    fn train_candidate(
        &self,
        fold: usize,
        bins: &[usize],
        train: &[FeatureMatrix],
        train_labels: &[crate::dataset::Label],
        dev: &[FeatureMatrix],
        dev_labels: &[crate::dataset::Label],
    ) -> Result<Vec<f64>> {
        use rand::Rng;

        let cfg = &self.cfg;
        let weights = class_weights(train_labels)?;
        // Candidate streams are keyed by the bin set so every candidate is
        // reproducible in isolation.
        let stream_key = bins
            .iter()
            .fold(0x9e3779b97f4a7c15u64, |acc, &b| {
                acc.rotate_left(7) ^ (b as u64 + 0x51_7c_c1_b7)
            })
            .wrapping_add(fold as u64);
        let mut stream = rng::stream(cfg.seed, "sfs-candidate", stream_key);

        let mut model = match cfg.arch {
            Arch::Bilstm => TrainedModel::Bilstm(BilstmParams::init(
                bins.len(),
                cfg.dropout_keep,
                &mut stream,
            )),
            Arch::BilstmAtt => TrainedModel::BilstmAtt(AttParams::init(
                bins.len(),
                cfg.dropout_keep,
                &mut stream,
            )),
            Arch::Lr => {
                return Err(Error::Selection(
                    "SFS scores the recurrent architectures, not lr".into(),
                ))
            }
        };
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
        let stratified = cfg.alpha > 0.0;
        let train_refs: Vec<&FeatureMatrix> = train.iter().collect();
        let dev_refs: Vec<&FeatureMatrix> = dev.iter().collect();

        let mut aucs = Vec::with_capacity(self.sfs_epochs);
        for _epoch in 0..self.sfs_epochs {
            let batches = epoch_batches(train_labels, cfg.batch_size, stratified, &mut stream)?;
            for indices in &batches {
                let feats: Vec<&FeatureMatrix> = indices.iter().map(|&i| train_refs[i]).collect();
                let truths: Vec<_> = indices.iter().map(|&i| train_labels[i]).collect();
                let dropout_seed: u64 = stream.gen();
                crate::harness::train_step(
                    &mut model,
                    &mut opt,
                    &feats,
                    &truths,
                    &weights,
                    cfg,
                    dropout_seed,
                )?;
            }
            let scores = predict_scores(&model, &dev_refs)?;
            aucs.push(roc_auc(&scores, dev_labels)?);
        }
        Ok(aucs)
    }
}

/// Full sequential forward search with cross-validated scoring.
pub fn sfs(
    prep: &crate::harness::PreparedCorpus,
    plan: &SplitPlan,
    cfg: &TrainConfig,
    sfs_cfg: &SfsConfig,
) -> Result<SfsTrace> {
    let scorer = CvScorer::from_plan(prep, plan, cfg, sfs_cfg)?;
    sfs_with_scorer(
        prep.width,
        |bins| scorer.score(bins),
        sfs_cfg.max_bins,
        sfs_cfg.patience,
    )
}

/// Convenience entry point from raw clips.
pub fn sfs_over_clips(
    clips: &[RawClip],
    cfg: &TrainConfig,
    sfs_cfg: &SfsConfig,
) -> Result<(SfsTrace, SplitPlan)> {
    let mut cfg = cfg.clone();
    cfg.bins = None;
    cfg.augment = false;
    let plan = crate::dataset::plan_splits(clips, cfg.k_folds, cfg.seed)?;
    let prep = crate::harness::prepare_corpus(clips, &cfg)?;
    let trace = sfs(&prep, &plan, &cfg, sfs_cfg)?;
    Ok((trace, plan))
}
