//! Training loop, 4-fold cross-validation, epoch selection by mean
//! development AUC, EER thresholding, fold ensembling and test evaluation.

mod batch;
mod metrics;
mod optimizer;

pub use batch::epoch_batches;
pub use metrics::{
    eer_threshold, evaluate, mean, roc_auc, roc_curve, std_dev, Metrics, RocPoint,
};
pub use optimizer::{Optimizer, OptimizerKind};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{plan_splits, CorpusTag, Label, RawClip, SplitPlan};
use crate::dsp::{extract_features, speed_perturb, FeatureMatrix, FeatureSpec};
use crate::error::{Error, Result};
use crate::models::{
    build_att_graph, build_bilstm_graph, load_checkpoint, lr_fit, pool_frames, save_checkpoint,
    Arch, AttParams, Batch, BilstmParams, ParamSet, TrainedModel,
};
use crate::objectives::{ce_from_logits_node, class_weights, combined_loss_node, ClassWeights};
use crate::rng;
use crate::tensor::Bindings;

/// Speed-perturbation factors; the identity factor is the unaugmented clip.
pub const SPEED_FACTORS: [f64; 2] = [0.9, 1.1];

/// Floor applied to the GE2E similarity scale after each update.
const GE2E_SCALE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: Arch,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// GE2E regularization weight; only the attention model accepts a
    /// nonzero value.
    pub alpha: f64,
    pub seed: u64,
    pub feature: FeatureSpec,
    pub augment: bool,
    pub optimizer: OptimizerKind,
    pub dropout_keep: f64,
    /// L2 strength for the logistic-regression baseline.
    pub l2: f64,
    /// Optional feature-bin mask from sequential forward search.
    pub bins: Option<Vec<usize>>,
    pub k_folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::BilstmAtt,
            epochs: 15,
            learning_rate: 1e-4,
            batch_size: 128,
            alpha: 0.1,
            seed: 0,
            feature: FeatureSpec::default(),
            augment: true,
            optimizer: OptimizerKind::Adam,
            dropout_keep: 0.5,
            l2: 1.0,
            bins: None,
            k_folds: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.k_folds < 2 {
            return Err(Error::Config(
                "epochs, batch_size and k_folds must be positive (k_folds >= 2)".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if self.alpha > 0.0 && self.arch != Arch::BilstmAtt {
            return Err(Error::Config(format!(
                "the GE2E term (alpha > 0) applies only to bilstm-att, not {}",
                self.arch
            )));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config("dropout_keep must lie in (0,1]".into()));
        }
        self.feature.validate()
    }
}

/// One clip with its extracted features: the unperturbed variant and, when
/// augmentation is on, the speed-perturbed variants (training side only).
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub patient_id: String,
    pub label: Label,
    pub corpus: CorpusTag,
    pub clip_path: String,
    pub base: FeatureMatrix,
    pub augmented: Vec<FeatureMatrix>,
}

#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub clips: Vec<PreparedClip>,
    pub width: usize,
}

/// Extract features once per (clip, warp factor); a bin mask is applied
/// after extraction so one pass serves any bin subset.
pub fn prepare_corpus(clips: &[RawClip], cfg: &TrainConfig) -> Result<PreparedCorpus> {
    cfg.validate()?;
    let restrict = |f: FeatureMatrix| -> Result<FeatureMatrix> {
        match &cfg.bins {
            Some(bins) => f.restrict_bins(bins),
            None => Ok(f),
        }
    };
    let mut prepared = Vec::with_capacity(clips.len());
    for clip in clips {
        let base = restrict(extract_features(&clip.clip, &cfg.feature)?)?;
        let mut augmented = Vec::new();
        if cfg.augment {
            for factor in SPEED_FACTORS {
                let warped = speed_perturb(&clip.clip, factor)?;
                augmented.push(restrict(extract_features(&warped, &cfg.feature)?)?);
            }
        }
        prepared.push(PreparedClip {
            patient_id: clip.patient_id.clone(),
            label: clip.label,
            corpus: clip.corpus,
            clip_path: clip.clip_path.clone(),
            base,
            augmented,
        });
    }
    let width = prepared
        .first()
        .map(|c| c.base.n_bins())
        .ok_or_else(|| Error::Corpus("no clips to prepare".into()))?;
    Ok(PreparedCorpus {
        clips: prepared,
        width,
    })
}

impl PreparedCorpus {
    /// Training examples (augmented) for a patient set.
    fn train_side(
        &self,
        patients: &std::collections::BTreeSet<String>,
    ) -> (Vec<&FeatureMatrix>, Vec<Label>) {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for clip in &self.clips {
            if !patients.contains(&clip.patient_id) {
                continue;
            }
            feats.push(&clip.base);
            labels.push(clip.label);
            for aug in &clip.augmented {
                feats.push(aug);
                labels.push(clip.label);
            }
        }
        (feats, labels)
    }

    /// Unaugmented examples for a patient set (dev and test sides).
    fn eval_side(
        &self,
        patients: &std::collections::BTreeSet<String>,
    ) -> (Vec<&PreparedClip>, Vec<Label>) {
        let mut clips = Vec::new();
        let mut labels = Vec::new();
        for clip in &self.clips {
            if patients.contains(&clip.patient_id) {
                clips.push(clip);
                labels.push(clip.label);
            }
        }
        (clips, labels)
    }
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub dev_auc: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

fn model_params_mut(model: &mut TrainedModel) -> Option<&mut ParamSet> {
    match model {
        TrainedModel::Bilstm(m) => Some(&mut m.params),
        TrainedModel::BilstmAtt(m) => Some(&mut m.params),
        TrainedModel::Lr(_) => None,
    }
}

/// TB probabilities for a list of feature matrices, in bounded-size chunks.
pub fn predict_scores(model: &TrainedModel, feats: &[&FeatureMatrix]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(feats.len());
    for chunk in feats.chunks(64) {
        out.extend(model.predict_proba(chunk)?);
    }
    Ok(out)
}

/// Train one fold: `epochs` optimizer passes, one checkpoint and one dev AUC
/// per epoch, deterministic for a fixed seed. The logistic-regression
/// baseline has no epoch loop and produces a single checkpoint.
pub fn train_fold(
    prep: &PreparedCorpus,
    plan: &SplitPlan,
    fold_idx: usize,
    cfg: &TrainConfig,
    ckpt_dir: &Path,
) -> Result<FoldRun> {
    cfg.validate()?;
    let train_patients = plan.fold_train_patients(fold_idx);
    let dev_patients = plan.dev_patients(fold_idx);
    let (train_feats, train_labels) = prep.train_side(&train_patients);
    let (dev_clips, dev_labels) = prep.eval_side(dev_patients);
    if train_feats.is_empty() || dev_clips.is_empty() {
        return Err(Error::Split(format!(
            "fold {fold_idx} has an empty train or dev side"
        )));
    }
    let dev_feats: Vec<&FeatureMatrix> = dev_clips.iter().map(|c| &c.base).collect();

    let fold_dir = ckpt_dir.join(format!("fold{fold_idx}"));
    std::fs::create_dir_all(&fold_dir)?;
    let weights = class_weights(&train_labels)?;

    if cfg.arch == Arch::Lr {
        return train_fold_lr(
            prep,
            &train_patients,
            &dev_feats,
            &dev_labels,
            cfg,
            fold_idx,
            &fold_dir,
        );
    }

    let mut stream = rng::stream(cfg.seed, "train-fold", fold_idx as u64);
    let mut model = match cfg.arch {
        Arch::Bilstm => {
            TrainedModel::Bilstm(BilstmParams::init(prep.width, cfg.dropout_keep, &mut stream))
        }
        Arch::BilstmAtt => {
            TrainedModel::BilstmAtt(AttParams::init(prep.width, cfg.dropout_keep, &mut stream))
        }
        Arch::Lr => unreachable!(),
    };
    if let Some(params) = model_params_mut(&mut model) {
        params.round_to_f32_grid();
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let stratified = cfg.alpha > 0.0;

    let mut dev_auc = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&train_labels, cfg.batch_size, stratified, &mut stream)?;
        for (batch_no, indices) in batches.iter().enumerate() {
            let feats: Vec<&FeatureMatrix> = indices.iter().map(|&i| train_feats[i]).collect();
            let truths: Vec<Label> = indices.iter().map(|&i| train_labels[i]).collect();
            let dropout_seed: u64 = stream.gen();
            train_step(
                &mut model,
                &mut opt,
                &feats,
                &truths,
                &weights,
                cfg,
                dropout_seed,
            )
            .map_err(|e| match e {
                Error::NonFinite { node, op } => Error::Diverged {
                    epoch,
                    batch: batch_no,
                    detail: format!("non-finite value at node {node} ({op})"),
                },
                other => other,
            })?;
        }

        let path = fold_dir.join(format!("epoch_{epoch:02}.ckpt"));
        save_checkpoint(
            &model.to_checkpoint(epoch as u32, fold_idx as u32, cfg.seed),
            &path,
        )?;
        checkpoints.push(path);

        let scores = predict_scores(&model, &dev_feats)?;
        dev_auc.push(roc_auc(&scores, &dev_labels)?);
    }
    Ok(FoldRun {
        dev_auc,
        checkpoints,
    })
}

pub(crate) fn train_step(
    model: &mut TrainedModel,
    opt: &mut Optimizer,
    feats: &[&FeatureMatrix],
    truths: &[Label],
    weights: &ClassWeights,
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> Result<()> {
    let batch = Batch::from_features(feats)?;
    let b = truths.len() as f64;
    let grads = match model {
        TrainedModel::Bilstm(params) => {
            let mut built = build_bilstm_graph(params, &batch)?;
            let ce = ce_from_logits_node(&mut built.graph, built.logits, truths, weights)?;
            let loss = built.graph.scale(ce, 1.0 / b);
            built.graph.mark_output("loss", loss);
            let mut bindings = Bindings::new();
            params.params.bind_into(&mut bindings, true);
            batch.bind_into(&mut bindings);
            built.graph.evaluate(
                &bindings,
                crate::tensor::EvalMode::Train { dropout_seed },
            )?;
            built.graph.backward("loss")?
        }
        TrainedModel::BilstmAtt(params) => {
            let mut built = build_att_graph(params, &batch)?;
            let scale = built.graph.leaf_id("ge2e.scale");
            let offset = built.graph.leaf_id("ge2e.offset");
            let loss = combined_loss_node(
                &mut built.graph,
                built.logits,
                truths,
                weights,
                built.embed,
                cfg.alpha,
                scale,
                offset,
            )?;
            built.graph.mark_output("loss", loss);
            let mut bindings = Bindings::new();
            params.params.bind_into(&mut bindings, true);
            batch.bind_into(&mut bindings);
            built.graph.evaluate(
                &bindings,
                crate::tensor::EvalMode::Train { dropout_seed },
            )?;
            built.graph.backward("loss")?
        }
        TrainedModel::Lr(_) => {
            return Err(Error::Model("lr has no gradient training step".into()))
        }
    };

    let params = model_params_mut(model).expect("recurrent model");
    opt.step(params, &grads)?;
    if let Ok(scale) = params.get_mut("ge2e.scale") {
        let v = scale.data_mut();
        if v[0] < GE2E_SCALE_FLOOR {
            v[0] = GE2E_SCALE_FLOOR;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_fold_lr(
    prep: &PreparedCorpus,
    train_patients: &std::collections::BTreeSet<String>,
    dev_feats: &[&FeatureMatrix],
    dev_labels: &[Label],
    cfg: &TrainConfig,
    fold_idx: usize,
    fold_dir: &Path,
) -> Result<FoldRun> {
    // Pool all training frames (augmented) across coughs.
    let mut samples = Vec::new();
    for clip in &prep.clips {
        if !train_patients.contains(&clip.patient_id) {
            continue;
        }
        let mut variants = vec![&clip.base];
        variants.extend(clip.augmented.iter());
        for feats in variants {
            samples.push(crate::dataset::CoughSample {
                features: (*feats).clone(),
                patient_id: clip.patient_id.clone(),
                label: clip.label,
                corpus: clip.corpus,
                clip_path: clip.clip_path.clone(),
            });
        }
    }
    let (frames, frame_labels) = pool_frames(&samples)?;
    let lr = lr_fit(&frames, &frame_labels, cfg.l2)?;
    let model = TrainedModel::Lr(lr);

    let path = fold_dir.join("epoch_00.ckpt");
    save_checkpoint(&model.to_checkpoint(0, fold_idx as u32, cfg.seed), &path)?;
    let scores = predict_scores(&model, dev_feats)?;
    Ok(FoldRun {
        dev_auc: vec![roc_auc(&scores, dev_labels)?],
        checkpoints: vec![path],
    })
}

/// Epoch with the highest mean dev AUC across folds; ties go to the earlier
/// epoch. Returns a zero-based epoch index.
pub fn select_epoch(fold_dev_auc: &[Vec<f64>]) -> Result<usize> {
    if fold_dev_auc.is_empty() {
        return Err(Error::Metric("no folds to select from".into()));
    }
    let epochs = fold_dev_auc[0].len();
    if epochs == 0 || fold_dev_auc.iter().any(|f| f.len() != epochs) {
        return Err(Error::Metric(
            "folds must have identical, nonzero epoch counts".into(),
        ));
    }
    let mut best = 0;
    let mut best_mean = f64::NEG_INFINITY;
    for e in 0..epochs {
        let m = fold_dev_auc.iter().map(|f| f[e]).sum::<f64>() / fold_dev_auc.len() as f64;
        if m > best_mean {
            best_mean = m;
            best = e;
        }
    }
    Ok(best)
}

/// Mean of the member models' TB probabilities for one sample.
pub fn ensemble_predict(models: &[TrainedModel], features: &FeatureMatrix) -> Result<f64> {
    let scores = ensemble_scores(models, &[features])?;
    Ok(scores[0])
}

/// Mean of the member models' TB probabilities for a batch of samples.
pub fn ensemble_scores(models: &[TrainedModel], feats: &[&FeatureMatrix]) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(Error::Model("empty ensemble".into()));
    }
    let arch = models[0].arch();
    let dim = models[0].input_dim();
    for m in models {
        if m.arch() != arch || m.input_dim() != dim {
            return Err(Error::Model(format!(
                "ensemble members disagree: {}({}) vs {}({})",
                m.arch(),
                m.input_dim(),
                arch,
                dim
            )));
        }
    }
    let mut acc = vec![0.0; feats.len()];
    for model in models {
        for (a, s) in acc.iter_mut().zip(predict_scores(model, feats)?) {
            *a += s;
        }
    }
    for a in &mut acc {
        *a /= models.len() as f64;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub arch: Arch,
    pub seed: u64,
    pub epochs: usize,
    /// Dev AUC per fold per epoch.
    pub fold_dev_auc: Vec<Vec<f64>>,
    /// Mean dev AUC per epoch across folds.
    pub mean_dev_auc: Vec<f64>,
    /// Zero-based index of the selected epoch.
    pub selected_epoch: usize,
    pub dev_auc_mean: f64,
    pub dev_auc_std: f64,
    /// Per-fold EER decision thresholds at the selected epoch.
    pub gamma_per_fold: Vec<f64>,
    pub eer_per_fold: Vec<f64>,
    pub gamma_mean: f64,
    pub gamma_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestScore {
    pub clip_path: String,
    pub patient_id: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: CvReport,
    pub plan: SplitPlan,
    /// Test metrics over individual coughs at the mean EER threshold.
    pub cough_metrics: Metrics,
    /// Test metrics over patients (mean cough score per patient).
    pub patient_metrics: Metrics,
    pub roc: Vec<RocPoint>,
    pub test_scores: Vec<TestScore>,
    pub models: Vec<TrainedModel>,
}

/// The full protocol: patient-wise split, 4 folds, per-epoch checkpoints,
/// epoch selection by mean dev AUC, per-fold EER thresholds, fold
/// ensembling, and test evaluation at the mean threshold.
pub fn run_cv(clips: &[RawClip], cfg: &TrainConfig, ckpt_dir: &Path) -> Result<CvOutcome> {
    cfg.validate()?;
    let plan = plan_splits(clips, cfg.k_folds, cfg.seed)?;
    let prep = prepare_corpus(clips, cfg)?;

    let mut fold_runs = Vec::with_capacity(cfg.k_folds);
    for fold in 0..cfg.k_folds {
        fold_runs.push(train_fold(&prep, &plan, fold, cfg, ckpt_dir)?);
    }
    let fold_dev_auc: Vec<Vec<f64>> = fold_runs.iter().map(|r| r.dev_auc.clone()).collect();
    let selected = select_epoch(&fold_dev_auc)?;
    let mean_dev_auc: Vec<f64> = (0..fold_dev_auc[0].len())
        .map(|e| mean(&fold_dev_auc.iter().map(|f| f[e]).collect::<Vec<_>>()))
        .collect();

    // Reload the selected-epoch checkpoints (exercises the on-disk round
    // trip) and derive each fold's EER threshold from its dev set.
    let mut models = Vec::with_capacity(cfg.k_folds);
    let mut gamma_per_fold = Vec::with_capacity(cfg.k_folds);
    let mut eer_per_fold = Vec::with_capacity(cfg.k_folds);
    for (fold, run) in fold_runs.iter().enumerate() {
        let ckpt = load_checkpoint(&run.checkpoints[selected])?;
        let model = TrainedModel::from_checkpoint(&ckpt, cfg.dropout_keep)?;
        let (dev_clips, dev_labels) = prep.eval_side(plan.dev_patients(fold));
        let dev_feats: Vec<&FeatureMatrix> = dev_clips.iter().map(|c| &c.base).collect();
        let scores = predict_scores(&model, &dev_feats)?;
        let (gamma, eer) = eer_threshold(&scores, &dev_labels)?;
        gamma_per_fold.push(gamma);
        eer_per_fold.push(eer);
        models.push(model);
    }
    let gamma_mean = mean(&gamma_per_fold);

    // Ensemble the fold models on the held-out test patients.
    let (test_clips, test_labels) = prep.eval_side(&plan.test_patients);
    let test_feats: Vec<&FeatureMatrix> = test_clips.iter().map(|c| &c.base).collect();
    let scores = ensemble_scores(&models, &test_feats)?;
    let cough_metrics = evaluate(&scores, &test_labels, gamma_mean)?;
    let roc = roc_curve(&scores, &test_labels)?;

    // Patient-level view: mean cough score per patient.
    let mut per_patient: BTreeMap<&str, (f64, usize, Label)> = BTreeMap::new();
    for (clip, &score) in test_clips.iter().zip(&scores) {
        let entry = per_patient
            .entry(&clip.patient_id)
            .or_insert((0.0, 0, clip.label));
        entry.0 += score;
        entry.1 += 1;
    }
    let patient_scores: Vec<f64> = per_patient.values().map(|(s, n, _)| s / *n as f64).collect();
    let patient_labels: Vec<Label> = per_patient.values().map(|(_, _, l)| *l).collect();
    let patient_metrics = evaluate(&patient_scores, &patient_labels, gamma_mean)?;

    let test_scores = test_clips
        .iter()
        .zip(&scores)
        .map(|(clip, &score)| TestScore {
            clip_path: clip.clip_path.clone(),
            patient_id: clip.patient_id.clone(),
            label: clip.label,
            score,
        })
        .collect();

    let selected_aucs: Vec<f64> = fold_dev_auc.iter().map(|f| f[selected]).collect();
    let gamma_std = std_dev(&gamma_per_fold);
    let report = CvReport {
        arch: cfg.arch,
        seed: cfg.seed,
        epochs: fold_dev_auc[0].len(),
        selected_epoch: selected,
        dev_auc_mean: mean(&selected_aucs),
        dev_auc_std: std_dev(&selected_aucs),
        fold_dev_auc,
        mean_dev_auc,
        gamma_per_fold,
        eer_per_fold,
        gamma_mean,
        gamma_std,
    };

    Ok(CvOutcome {
        report,
        plan,
        cough_metrics,
        patient_metrics,
        roc,
        test_scores,
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_selection_takes_argmax_of_means() {
        let folds = vec![vec![0.6, 0.7, 0.8], vec![0.6, 0.7, 0.9]];
        assert_eq!(select_epoch(&folds).unwrap(), 2);
    }

    #[test]
    fn epoch_selection_breaks_ties_early() {
        let folds = vec![vec![0.7, 0.7, 0.7], vec![0.5, 0.5, 0.5]];
        assert_eq!(select_epoch(&folds).unwrap(), 0);
    }

    #[test]
    fn single_fold_degenerates_to_its_argmax() {
        let folds = vec![vec![0.2, 0.9, 0.4]];
        assert_eq!(select_epoch(&folds).unwrap(), 1);
    }

    #[test]
    fn ragged_epoch_counts_are_rejected() {
        let folds = vec![vec![0.2, 0.9], vec![0.2]];
        assert!(select_epoch(&folds).is_err());
    }
}
