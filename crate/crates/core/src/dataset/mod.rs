//! Corpus ingestion, patient-wise stratified splitting and 4-fold
//! cross-validation partitioning, plus a synthetic corpus generator with
//! known ground truth.

mod synth;

pub use synth::{synth_corpus, ClipMeta, PatientMeta, SynthConfig, SynthMeta, SynthOutput};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dsp::{extract_features, read_wav, AudioClip, FeatureMatrix, FeatureSpec};
use crate::error::{Error, Result};
use crate::rng;

/// Binary TB status. TB is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    NotTb,
    Tb,
}

impl Label {
    /// Class index used by model output layers: NOT_TB = 0, TB = 1.
    pub fn index(self) -> usize {
        match self {
            Label::NotTb => 0,
            Label::Tb => 1,
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Label::NotTb => [1.0, 0.0],
            Label::Tb => [0.0, 1.0],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "TB" => Ok(Label::Tb),
            "NOT_TB" => Ok(Label::NotTb),
            other => Err(Error::Corpus(format!(
                "unknown label {other:?} (expected TB or NOT_TB)"
            ))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Tb => "TB",
            Label::NotTb => "NOT_TB",
        })
    }
}

/// Source corpus tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorpusTag {
    A,
    B,
}

impl CorpusTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(CorpusTag::A),
            "B" => Ok(CorpusTag::B),
            other => Err(Error::Corpus(format!(
                "unknown corpus tag {other:?} (expected A or B)"
            ))),
        }
    }
}

impl fmt::Display for CorpusTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusTag::A => "A",
            CorpusTag::B => "B",
        })
    }
}

/// A raw audio clip with its provenance, before feature extraction.
#[derive(Debug, Clone)]
pub struct RawClip {
    pub clip: AudioClip,
    pub patient_id: String,
    pub label: Label,
    pub corpus: CorpusTag,
    pub clip_path: String,
}

/// A cough ready for modeling: features plus immutable provenance.
#[derive(Debug, Clone)]
pub struct CoughSample {
    pub features: FeatureMatrix,
    pub patient_id: String,
    pub label: Label,
    pub corpus: CorpusTag,
    pub clip_path: String,
}

/// Per-label/per-corpus counts of a loaded corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub patients_tb: usize,
    pub patients_not_tb: usize,
    pub coughs_tb: usize,
    pub coughs_not_tb: usize,
    pub coughs_corpus_a: usize,
    pub coughs_corpus_b: usize,
}

pub fn summarize(clips: &[RawClip]) -> CorpusSummary {
    let mut patients: BTreeMap<&str, Label> = BTreeMap::new();
    let mut s = CorpusSummary {
        patients_tb: 0,
        patients_not_tb: 0,
        coughs_tb: 0,
        coughs_not_tb: 0,
        coughs_corpus_a: 0,
        coughs_corpus_b: 0,
    };
    for c in clips {
        patients.insert(&c.patient_id, c.label);
        match c.label {
            Label::Tb => s.coughs_tb += 1,
            Label::NotTb => s.coughs_not_tb += 1,
        }
        match c.corpus {
            CorpusTag::A => s.coughs_corpus_a += 1,
            CorpusTag::B => s.coughs_corpus_b += 1,
        }
    }
    for (_, label) in patients {
        match label {
            Label::Tb => s.patients_tb += 1,
            Label::NotTb => s.patients_not_tb += 1,
        }
    }
    s
}

/// Load raw clips from a manifest CSV with header
/// `clip_path,patient_id,label,corpus`. Paths are resolved relative to the
/// manifest's directory. Errors name the offending data row (1-based).
pub fn load_clips(manifest_path: &Path) -> Result<Vec<RawClip>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest_path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", manifest_path.display())))?;

    let mut clips = Vec::new();
    let mut patient_labels: BTreeMap<String, (Label, usize)> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Manifest {
            row,
            detail: e.to_string(),
        })?;
        if record.len() != 4 {
            return Err(Error::Manifest {
                row,
                detail: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let rel = &record[0];
        let patient_id = record[1].to_string();
        let label = Label::parse(&record[2]).map_err(|e| Error::Manifest {
            row,
            detail: e.to_string(),
        })?;
        let corpus = CorpusTag::parse(&record[3]).map_err(|e| Error::Manifest {
            row,
            detail: e.to_string(),
        })?;

        if let Some((prev, prev_row)) = patient_labels.get(&patient_id) {
            if *prev != label {
                return Err(Error::Manifest {
                    row,
                    detail: format!(
                        "patient {patient_id:?} has label {label} here but {prev} at row {prev_row}"
                    ),
                });
            }
        } else {
            patient_labels.insert(patient_id.clone(), (label, row));
        }

        let full = base.join(rel);
        let clip = read_wav(&full).map_err(|e| Error::Manifest {
            row,
            detail: format!("{rel}: {e}"),
        })?;
        clips.push(RawClip {
            clip,
            patient_id,
            label,
            corpus,
            clip_path: rel.to_string(),
        });
    }
    if clips.is_empty() {
        return Err(Error::Corpus("no samples in manifest".into()));
    }
    Ok(clips)
}

/// Load a corpus and extract features for every clip.
pub fn load_corpus(manifest_path: &Path, spec: &FeatureSpec) -> Result<Vec<CoughSample>> {
    let clips = load_clips(manifest_path)?;
    clips
        .iter()
        .map(|c| {
            Ok(CoughSample {
                features: extract_features(&c.clip, spec)?,
                patient_id: c.patient_id.clone(),
                label: c.label,
                corpus: c.corpus,
                clip_path: c.clip_path.clone(),
            })
        })
        .collect()
}

/// Fraction of patients assigned to the held-out test side: 25 of 74.
pub const TEST_FRACTION: f64 = 25.0 / 74.0;

/// Patient-wise split plan: a held-out test set and `k` disjoint
/// cross-validation folds (stored as their development patient sets) that
/// cover the training side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_patients: BTreeSet<String>,
    pub folds: Vec<BTreeSet<String>>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn train_patients(&self) -> BTreeSet<String> {
        self.folds.iter().flatten().cloned().collect()
    }

    /// Development patients of fold `i`.
    pub fn dev_patients(&self, i: usize) -> &BTreeSet<String> {
        &self.folds[i]
    }

    /// Training patients of fold `i`: the train side minus its dev set.
    pub fn fold_train_patients(&self, i: usize) -> BTreeSet<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// Patient roster grouped into (label, corpus) strata, sorted for
/// determinism.
fn strata_of(clips: &[RawClip]) -> BTreeMap<(Label, CorpusTag), Vec<String>> {
    let mut patients: BTreeMap<String, (Label, CorpusTag)> = BTreeMap::new();
    for c in clips {
        patients.insert(c.patient_id.clone(), (c.label, c.corpus));
    }
    let mut strata: BTreeMap<(Label, CorpusTag), Vec<String>> = BTreeMap::new();
    for (id, key) in patients {
        strata.entry(key).or_default().push(id);
    }
    strata
}

fn check_strata(strata: &BTreeMap<(Label, CorpusTag), Vec<String>>, min_each: usize) -> Result<()> {
    let n: usize = strata.values().map(Vec::len).sum();
    if n < 8 {
        return Err(Error::Split(format!(
            "need at least 8 patients, got {n}"
        )));
    }
    let labels: BTreeSet<Label> = strata.keys().map(|k| k.0).collect();
    let corpora: BTreeSet<CorpusTag> = strata.keys().map(|k| k.1).collect();
    if labels.len() < 2 || corpora.len() < 2 {
        return Err(Error::Split(
            "both labels and both corpus tags must be represented".into(),
        ));
    }
    for (key, members) in strata {
        if members.len() < min_each {
            return Err(Error::Split(format!(
                "stratum {key:?} has only {} patient(s); need at least {min_each}",
                members.len()
            )));
        }
    }
    Ok(())
}

/// Allocate `target` picks across strata proportionally to stratum size
/// (largest remainder), keeping at least one patient on each side of every
/// stratum.
fn proportional_allocation(sizes: &[usize], target: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| s as f64 * target as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = exact
        .iter()
        .zip(sizes)
        .map(|(&e, &s)| (e.floor() as usize).clamp(1, s - 1))
        .collect();
    // Largest-remainder fixup toward the exact target.
    loop {
        let current: usize = alloc.iter().sum();
        if current == target {
            break;
        }
        if current < target {
            let (i, _) = exact
                .iter()
                .enumerate()
                .filter(|(i, _)| alloc[*i] < sizes[*i] - 1)
                .max_by(|a, b| {
                    let ra = a.1 - alloc[a.0] as f64;
                    let rb = b.1 - alloc[b.0] as f64;
                    ra.partial_cmp(&rb).unwrap()
                })
                .expect("allocation infeasible");
            alloc[i] += 1;
        } else {
            let (i, _) = exact
                .iter()
                .enumerate()
                .filter(|(i, _)| alloc[*i] > 1)
                .min_by(|a, b| {
                    let ra = a.1 - alloc[a.0] as f64;
                    let rb = b.1 - alloc[b.0] as f64;
                    ra.partial_cmp(&rb).unwrap()
                })
                .expect("allocation infeasible");
            alloc[i] -= 1;
        }
    }
    alloc
}

/// Patient-wise stratified train/test split. With 74 patients this yields
/// the 49/25 division; other corpus sizes keep the same test fraction.
/// Both corpora and both labels are represented on each side, and the split
/// is deterministic per seed.
pub fn split_train_test(clips: &[RawClip], seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let strata = strata_of(clips);
    check_strata(&strata, 2)?;
    let n: usize = strata.values().map(Vec::len).sum();
    let target_test = ((n as f64 * TEST_FRACTION).round() as usize).clamp(
        strata.len(),
        n - strata.len(),
    );

    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let alloc = proportional_allocation(&sizes, target_test);

    let mut rng = rng::stream(seed, "split-train-test", 0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((_, members), &take) in strata.iter().zip(&alloc) {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        test.extend(members.drain(..take));
        train.extend(members);
    }
    train.sort();
    test.sort();
    Ok((train, test))
}

/// Partition the training side into `k` disjoint development sets, one per
/// fold. Each label's patients are dealt round-robin across the folds (with
/// the two corpora interleaved inside the label), so every development set
/// carries both labels whenever the train side has at least `k` patients of
/// each label, and corpora stay spread across folds.
pub fn make_folds(
    clips: &[RawClip],
    train_patients: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<BTreeSet<String>>> {
    if k < 2 {
        return Err(Error::Split(format!("need at least 2 folds, got {k}")));
    }
    let train_set: BTreeSet<&str> = train_patients.iter().map(String::as_str).collect();
    let mut strata = strata_of(clips);
    for members in strata.values_mut() {
        members.retain(|p| train_set.contains(p.as_str()));
    }
    strata.retain(|_, members| !members.is_empty());
    check_strata(&strata, 1)?;

    let mut rng = rng::stream(seed, "make-folds", 0);
    let mut folds: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    let mut start = 0usize;
    for label in [Label::NotTb, Label::Tb] {
        // Interleave the label's corpora so folds receive a mix of both.
        let mut per_corpus: Vec<Vec<String>> = [CorpusTag::A, CorpusTag::B]
            .iter()
            .map(|&tag| {
                let mut members = strata.get(&(label, tag)).cloned().unwrap_or_default();
                members.shuffle(&mut rng);
                members
            })
            .collect();
        let mut interleaved = Vec::new();
        let longest = per_corpus.iter().map(Vec::len).max().unwrap_or(0);
        for i in 0..longest {
            for members in &mut per_corpus {
                if i < members.len() {
                    interleaved.push(std::mem::take(&mut members[i]));
                }
            }
        }
        if interleaved.len() < k {
            return Err(Error::Split(format!(
                "train side has only {} {label} patient(s); need at least {k} so every fold's \
                 development set contains both labels",
                interleaved.len()
            )));
        }
        for (i, p) in interleaved.into_iter().enumerate() {
            folds[(start + i) % k].insert(p);
        }
        start = (start + 1) % k;
    }

    for (i, fold) in folds.iter().enumerate() {
        if fold.is_empty() {
            return Err(Error::Split(format!("fold {i} has no dev patients")));
        }
    }
    Ok(folds)
}

/// Convenience wrapper: split train/test, then fold the training side.
pub fn plan_splits(clips: &[RawClip], k: usize, seed: u64) -> Result<SplitPlan> {
    let (train, test) = split_train_test(clips, seed)?;
    let folds = make_folds(clips, &train, k, seed)?;
    Ok(SplitPlan {
        test_patients: test.into_iter().collect(),
        folds,
        seed,
    })
}
