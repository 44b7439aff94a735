//! Classification performance: two-fold cross-validation by tool parity,
//! ROC curves over empirical scores, and accuracy as one signature of each
//! pair is shortened.

use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::{collect_scores, fit_densities, AggregationMode, DensityError, ScoreDensities};
use crate::extraction::Signature;
use crate::likelihood::{classify_at, Classification};
use crate::similarity::{
    align_prepared, similarity_matrix, PreparedSignature, SimilarityError, SimilarityMatrix, DEFAULT_MAX_LAG_FRAC,
    MIN_OVERLAP_SAMPLES,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("fold {fold}: {reason}")]
    Fold { fold: Fold, reason: String },
    #[error("training on fold {fold} failed: {source}")]
    Training { fold: Fold, source: DensityError },
    #[error("length {length_mm} mm is not in (0, {max_mm}] mm")]
    BadLength { length_mm: f64, max_mm: f64 },
    #[error("need at least two signatures")]
    TooFewSignatures,
    #[error("signatures have differing pitch")]
    MixedPitch,
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

/// Fold named by tool-id parity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Even,
    Odd,
}

impl Fold {
    pub fn of(tool_id: u32) -> Fold {
        if tool_id.is_multiple_of(2) {
            Fold::Even
        } else {
            Fold::Odd
        }
    }

    pub fn other(self) -> Fold {
        match self {
            Fold::Even => Fold::Odd,
            Fold::Odd => Fold::Even,
        }
    }
}

impl std::fmt::Display for Fold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            Fold::Even => "even",
            Fold::Odd => "odd",
        })
    }
}

/// Counts of a threshold classifier over known-match and known-non-match pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl Confusion {
    pub fn from_scores(km: &[f64], knm: &[f64], threshold: f64) -> Self {
        let tp = km.iter().filter(|&&s| classify_at(threshold, s) == Classification::SameSource).count();
        let fp = knm.iter().filter(|&&s| classify_at(threshold, s) == Classification::SameSource).count();
        Confusion { tp, fn_: km.len() - tp, tn: knm.len() - fp, fp }
    }

    /// NaN when there are no known-match pairs.
    pub fn sensitivity(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    /// NaN when there are no known-non-match pairs.
    pub fn specificity(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub train: Fold,
    pub test: Fold,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthPoint {
    pub length_mm: f64,
    pub samples: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub mean_km_score: f64,
    pub mean_knm_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedLength {
    pub length_mm: f64,
    pub samples: usize,
    pub reason: String,
}

/// Where a truncated segment of signature `i` registered on the full `j`.
/// `start` is the segment's offset in `i`; the segment's first sample pairs
/// with sample `lag` of `j`, so a correctly placed segment has
/// `lag ≈ start` plus the replicate shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlacement {
    pub length_mm: f64,
    pub i: usize,
    pub j: usize,
    pub start: usize,
    pub lag: i64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSweep {
    pub threshold: f64,
    /// Free-form description of the model the threshold came from.
    pub model: String,
    pub points: Vec<LengthPoint>,
    pub skipped: Vec<SkippedLength>,
    /// Known-match pairs only.
    pub placements: Vec<SegmentPlacement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: String,
    pub sensitivity: f64,
    pub specificity: f64,
    pub per_fold: Vec<FoldResult>,
    /// Pooled over both test folds, ordered by decreasing threshold.
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    /// Each fold's fitted threshold placed on the pooled curve.
    pub operating_points: Vec<RocPoint>,
    pub length_sweep: Option<LengthSweep>,
}

impl EvaluationReport {
    pub fn with_length_sweep(mut self, sweep: LengthSweep) -> Self {
        self.length_sweep = Some(sweep);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn per_fold_csv(&self) -> String {
        let mut out = String::from("train,test,threshold,sensitivity,specificity,tp,fn,tn,fp\n");
        for f in &self.per_fold {
            let c = f.confusion;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                f.train, f.test, f.threshold, f.sensitivity, f.specificity, c.tp, c.fn_, c.tn, c.fp
            );
        }
        out
    }

    /// Curve rows followed by the fold operating points.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("kind,fpr,tpr,threshold\n");
        for p in &self.roc {
            let _ = writeln!(out, "curve,{},{},{}", p.fpr, p.tpr, p.threshold);
        }
        for p in &self.operating_points {
            let _ = writeln!(out, "fitted-threshold,{},{},{}", p.fpr, p.tpr, p.threshold);
        }
        out
    }

    /// Fixed-width summary of the per-fold and averaged rates.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<10} {:>10} {:>12} {:>12}",
            "train", "test", "threshold", "sensitivity", "specificity"
        );
        for f in &self.per_fold {
            let _ = writeln!(
                out,
                "{:<10} {:<10} {:>10.4} {:>12.4} {:>12.4}",
                f.train, f.test, f.threshold, f.sensitivity, f.specificity
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:<10} {:>10} {:>12.4} {:>12.4}",
            "average", "", "", self.sensitivity, self.specificity
        );
        let _ = writeln!(out, "ROC area: {:.4}", self.auc);
        out
    }
}

impl LengthSweep {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("length_mm,samples,sensitivity,specificity,mean_km_score,mean_knm_score,threshold\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.length_mm, p.samples, p.sensitivity, p.specificity, p.mean_km_score, p.mean_knm_score, self.threshold
            );
        }
        out
    }

    pub fn placements_csv(&self) -> String {
        let mut out = String::from("length_mm,i,j,start,lag,score\n");
        for p in &self.placements {
            let _ = writeln!(out, "{},{},{},{},{},{}", p.length_mm, p.i, p.j, p.start, p.lag, p.score);
        }
        out
    }
}

/// Known-match and known-non-match scores of every individual pair.
fn pair_scores(sim: &SimilarityMatrix) -> (Vec<f64>, Vec<f64>) {
    let labels = sim.labels();
    let (mut km, mut knm) = (Vec::new(), Vec::new());
    for i in 0..sim.len() {
        for j in i + 1..sim.len() {
            if labels[i].source() == labels[j].source() {
                km.push(sim.get(i, j));
            } else {
                knm.push(sim.get(i, j));
            }
        }
    }
    (km, knm)
}

fn fold_indices(labels: &[crate::meta::SourceMeta], fold: Fold) -> Vec<usize> {
    (0..labels.len()).filter(|&i| Fold::of(labels[i].tool_id) == fold).collect()
}

fn check_fold(sim: &SimilarityMatrix, fold: Fold) -> Result<(), EvaluationError> {
    let mut counts = std::collections::BTreeMap::new();
    for label in sim.labels() {
        *counts.entry(label.source()).or_insert(0usize) += 1;
    }
    let replicated = counts.values().filter(|&&c| c >= 2).count();
    if replicated < 2 {
        return Err(EvaluationError::Fold {
            fold,
            reason: format!(
                "needs at least 2 sources with 2 or more replicates, found {replicated} among {} sources",
                counts.len()
            ),
        });
    }
    Ok(())
}

/// Cross-validation from precomputed matrices of each fold.
fn crossvalidate_folds(
    even: &SimilarityMatrix,
    odd: &SimilarityMatrix,
    mode: AggregationMode,
) -> Result<EvaluationReport, EvaluationError> {
    check_fold(even, Fold::Even)?;
    check_fold(odd, Fold::Odd)?;
    let matrix = |f: Fold| if f == Fold::Even { even } else { odd };

    let mut per_fold = Vec::with_capacity(2);
    let (mut pooled_km, mut pooled_knm) = (Vec::new(), Vec::new());
    for train in [Fold::Even, Fold::Odd] {
        let test = train.other();
        let model = collect_scores(matrix(train), mode)
            .and_then(|s| fit_densities(&s))
            .map_err(|source| EvaluationError::Training { fold: train, source })?;
        let (km, knm) = pair_scores(matrix(test));
        let confusion = Confusion::from_scores(&km, &knm, model.threshold);
        per_fold.push(FoldResult {
            train,
            test,
            threshold: model.threshold,
            sensitivity: confusion.sensitivity(),
            specificity: confusion.specificity(),
            confusion,
        });
        pooled_km.extend(km);
        pooled_knm.extend(knm);
    }

    let roc = roc_curve(&pooled_km, &pooled_knm);
    let operating_points = per_fold
        .iter()
        .map(|f| {
            let c = Confusion::from_scores(&pooled_km, &pooled_knm, f.threshold);
            RocPoint { fpr: 1.0 - c.specificity(), tpr: c.sensitivity(), threshold: f.threshold }
        })
        .collect();
    Ok(EvaluationReport {
        mode: mode.to_string(),
        sensitivity: per_fold.iter().map(|f| f.sensitivity).sum::<f64>() / 2.0,
        specificity: per_fold.iter().map(|f| f.specificity).sum::<f64>() / 2.0,
        auc: roc_area(&pooled_km, &pooled_knm),
        per_fold,
        roc,
        operating_points,
        length_sweep: None,
    })
}

/// Two-fold cross-validation: even tool ids form one fold, odd the other.
/// Each fold trains a model that classifies every pair of the other fold.
pub fn crossvalidate(collection: &[Signature], mode: AggregationMode) -> Result<EvaluationReport, EvaluationError> {
    let labels: Vec<_> = collection.iter().map(|s| *s.meta()).collect();
    let pick = |fold: Fold| -> Vec<Signature> {
        fold_indices(&labels, fold).into_iter().map(|i| collection[i].clone()).collect()
    };
    let mut matrices = Vec::with_capacity(2);
    for fold in [Fold::Even, Fold::Odd] {
        let members = pick(fold);
        if members.len() < 2 {
            return Err(EvaluationError::Fold { fold, reason: format!("has {} signatures", members.len()) });
        }
        matrices.push(similarity_matrix(&members)?);
    }
    crossvalidate_folds(&matrices[0], &matrices[1], mode)
}

/// Same as [`crossvalidate`] but reuses a similarity matrix over the whole
/// collection.
pub fn crossvalidate_matrix(
    sim: &SimilarityMatrix,
    mode: AggregationMode,
) -> Result<EvaluationReport, EvaluationError> {
    let even = sim.subset(&fold_indices(sim.labels(), Fold::Even));
    let odd = sim.subset(&fold_indices(sim.labels(), Fold::Odd));
    for (fold, m) in [(Fold::Even, &even), (Fold::Odd, &odd)] {
        if m.len() < 2 {
            return Err(EvaluationError::Fold { fold, reason: format!("has {} signatures", m.len()) });
        }
    }
    crossvalidate_folds(&even, &odd, mode)
}

/// ROC points ordered by decreasing threshold. Thresholds are the distinct
/// scores plus 0 and 1; a pair counts as positive when its score is strictly
/// above the threshold.
pub fn roc_curve(km_scores: &[f64], knm_scores: &[f64]) -> Vec<RocPoint> {
    let mut km = km_scores.to_vec();
    let mut knm = knm_scores.to_vec();
    km.sort_by(f64::total_cmp);
    knm.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = km.iter().chain(&knm).copied().chain([0.0, 1.0]).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    // fraction strictly above t, via binary search on the sorted sample
    let above = |sorted: &[f64], t: f64| {
        if sorted.is_empty() {
            return 0.0;
        }
        let at_or_below = sorted.partition_point(|&s| s <= t);
        (sorted.len() - at_or_below) as f64 / sorted.len() as f64
    };
    thresholds.into_iter().map(|t| RocPoint { fpr: above(&knm, t), tpr: above(&km, t), threshold: t }).collect()
}

/// Trapezoidal area under a curve from [`roc_curve`], anchored at (0,0)
/// and (1,1).
pub fn auc(roc: &[RocPoint]) -> f64 {
    let mut area = 0.0;
    let (mut x0, mut y0) = (0.0, 0.0);
    for p in roc.iter().map(|p| (p.fpr, p.tpr)).chain([(1.0, 1.0)]) {
        area += (p.0 - x0) * (p.1 + y0) / 2.0;
        (x0, y0) = p;
    }
    area
}

/// Area under the ROC curve of two samples, computed exactly from pair
/// counts: the probability that a known-match score beats a known-non-match
/// score, ties counting one half. Equals [`auc`] of [`roc_curve`] up to
/// rounding. NaN when either sample is empty.
pub fn roc_area(km_scores: &[f64], knm_scores: &[f64]) -> f64 {
    let mut knm = knm_scores.to_vec();
    knm.sort_by(f64::total_cmp);
    // twice the Mann-Whitney U, kept integral
    let twice_u: u128 = km_scores
        .iter()
        .map(|&s| {
            let below = knm.partition_point(|&v| v < s);
            let at_or_below = knm.partition_point(|&v| v <= s);
            (2 * below + (at_or_below - below)) as u128
        })
        .sum();
    twice_u as f64 / (2 * km_scores.len() as u128 * knm.len() as u128) as f64
}

/// Samples kept when truncating to `length_mm` at the given pitch.
pub fn truncated_samples(length_mm: f64, pitch_um: f64) -> usize {
    (length_mm * 1000.0 / pitch_um).round() as usize
}

/// Accuracy as the lower-index signature of each pair is cut to its central
/// `length_mm` and registered against the full partner. Lengths yielding
/// fewer than the minimum overlap are skipped with a warning.
pub fn length_sweep(
    collection: &[Signature],
    model: &ScoreDensities,
    lengths_mm: &[f64],
) -> Result<LengthSweep, EvaluationError> {
    if collection.len() < 2 {
        return Err(EvaluationError::TooFewSignatures);
    }
    let pitch = collection[0].pitch();
    if collection.iter().any(|s| (s.pitch() - pitch).abs() > 1e-9 * pitch) {
        return Err(EvaluationError::MixedPitch);
    }
    let shortest = collection.iter().map(|s| s.len()).min().unwrap_or(0);
    let max_mm = shortest as f64 * pitch / 1000.0;
    let labels: Vec<_> = collection.iter().map(|s| s.meta().source()).collect();
    let n = collection.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();

    let mut sweep = LengthSweep {
        threshold: model.threshold,
        model: format!(
            "{} model, threshold {:.6}, trained on {} known-match / {} known-non-match scores",
            model.mode, model.threshold, model.n_km, model.n_knm
        ),
        points: Vec::new(),
        skipped: Vec::new(),
        placements: Vec::new(),
    };
    for &length_mm in lengths_mm {
        if !(length_mm > 0.0 && length_mm <= max_mm + 0.5 * pitch / 1000.0) {
            return Err(EvaluationError::BadLength { length_mm, max_mm });
        }
        let samples = truncated_samples(length_mm, pitch).min(shortest);
        if samples < MIN_OVERLAP_SAMPLES {
            warn!("skipping length {length_mm} mm: {samples} samples is below the minimum overlap of {MIN_OVERLAP_SAMPLES}");
            sweep.skipped.push(SkippedLength {
                length_mm,
                samples,
                reason: format!("{samples} samples is below the minimum overlap of {MIN_OVERLAP_SAMPLES}"),
            });
            continue;
        }

        let segments: Vec<(usize, PreparedSignature)> = collection
            .par_iter()
            .map(|s| {
                let (start, seg) = s.central_window(samples);
                (start, PreparedSignature::with_partner_len(&seg, s.len()))
            })
            .collect();
        let full: Vec<PreparedSignature> =
            collection.par_iter().map(|s| PreparedSignature::with_partner_len(s, samples)).collect();
        let results: Vec<(f64, i64)> = pairs
            .par_iter()
            .map(|&(i, j)| {
                align_prepared(&segments[i].1, &full[j], DEFAULT_MAX_LAG_FRAC)
                    .map(|a| (a.score, a.lag))
                    .map_err(|e| SimilarityError::Pair { i, j, source: Box::new(e) })
            })
            .collect::<Result<_, _>>()?;

        let (mut km, mut knm) = (Vec::new(), Vec::new());
        for (&(i, j), &(score, lag)) in pairs.iter().zip(&results) {
            if labels[i] == labels[j] {
                km.push(score);
                sweep.placements.push(SegmentPlacement { length_mm, i, j, start: segments[i].0, lag, score });
            } else {
                knm.push(score);
            }
        }
        let c = Confusion::from_scores(&km, &knm, model.threshold);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        sweep.points.push(LengthPoint {
            length_mm,
            samples,
            sensitivity: c.sensitivity(),
            specificity: c.specificity(),
            mean_km_score: mean(&km),
            mean_knm_score: mean(&knm),
        });
    }
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_separated_and_identical() {
        let roc = roc_curve(&[0.8, 0.9, 0.95], &[0.1, 0.2, 0.3]);
        assert!(roc.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&roc), 1.0);
        let same = [0.2, 0.4, 0.4, 0.7];
        let diag = roc_curve(&same, &same);
        assert!(diag.iter().all(|p| p.fpr == p.tpr));
        assert_eq!(auc(&diag), 0.5);
    }

    #[test]
    fn roc_is_monotone_and_ends_at_sentinels() {
        let roc = roc_curve(&[0.3, 0.6, 0.9, 0.5], &[0.2, 0.55, 0.4]);
        assert_eq!(roc.first().unwrap().threshold, 1.0);
        assert_eq!(roc.last().unwrap().threshold, 0.0);
        for w in roc.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        }
        assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        let last = roc.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn auc_counts_ties_as_half() {
        // one km and one knm with the same score: area 0.5
        assert_eq!(auc(&roc_curve(&[0.5], &[0.5])), 0.5);
        // Mann-Whitney: km {0.6, 0.4}, knm {0.5} -> 1 of 2 pairs ordered
        assert_eq!(auc(&roc_curve(&[0.6, 0.4], &[0.5])), 0.5);
        assert_eq!(auc(&roc_curve(&[0.6, 0.55], &[0.5, 0.1])), 1.0);
    }

    #[test]
    fn exact_area_matches_trapezoid() {
        let km = [0.9, 0.4, 0.7, 0.7, 0.55];
        let knm = [0.3, 0.7, 0.5, 0.1];
        assert!((roc_area(&km, &knm) - auc(&roc_curve(&km, &knm))).abs() < 1e-15);
        let same: Vec<f64> = (0..41).map(|i| (i as f64 * 0.37).fract()).collect();
        assert_eq!(roc_area(&same, &same), 0.5);
        assert_eq!(roc_area(&[0.9], &[0.1, 0.2]), 1.0);
    }

    #[test]
    fn confusion_counts_add_up() {
        let c = Confusion::from_scores(&[0.9, 0.7, 0.5], &[0.1, 0.6, 0.7, 0.2], 0.6);
        assert_eq!(c, Confusion { tp: 2, fn_: 1, tn: 3, fp: 1 });
        assert!((c.sensitivity() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.specificity(), 0.75);
    }

    #[test]
    fn fold_parity() {
        assert_eq!(Fold::of(4), Fold::Even);
        assert_eq!(Fold::of(7), Fold::Odd);
        assert_eq!(Fold::Even.other(), Fold::Odd);
    }

    #[test]
    fn truncation_rounds() {
        assert_eq!(truncated_samples(1.5, 3.45), 435);
        assert_eq!(truncated_samples(6.0, 3.45), 1739);
    }
}
