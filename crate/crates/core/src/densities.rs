//! Known-match / known-non-match score samples, Beta fits by moment
//! matching, and the decision threshold where the fitted densities cross.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::meta::SourceId;
use crate::similarity::SimilarityMatrix;

/// Scores are clamped into `[SCORE_EPS, 1 - SCORE_EPS]` before fitting or
/// density evaluation.
pub const SCORE_EPS: f64 = 1e-9;
/// Below this many scores per class the fitted densities are flagged as unreliable.
pub const MIN_RELIABLE_PER_CLASS: usize = 30;
pub const SMALL_SAMPLE_CAVEAT: &str =
    "warning: fewer than 30 scores in a class; densities fitted on so few scores are not reliable for statistical inference";

const BISECTION_WIDTH: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("need at least 2 sources, found {0}")]
    TooFewSources(usize),
    #[error("no source has 2 or more replicates; known-match sample is empty")]
    EmptyKnownMatch,
    #[error("downsampling needs at least {needed} non-match scores, found {found}")]
    NotEnoughNonMatch { needed: usize, found: usize },
    #[error("need at least 3 scores to fit a Beta density, got {0}")]
    TooFewScores(usize),
    #[error("moment matching infeasible for mean {mean} and variance {var}; collect more data")]
    Infeasible { mean: f64, var: f64 },
    #[error("known-match mean {km} does not exceed known-non-match mean {knm}")]
    NotSeparated { km: f64, knm: f64 },
    #[error("log density ratio does not change sign on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },
    #[error("x = {0} outside the open unit interval")]
    OutOfDomain(f64),
    #[error("invalid model: {0}")]
    Model(String),
}

/// How non-match scores are aggregated across replicate pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationMode {
    /// One score per pair of sources: the mean over all cross-replicate pairs.
    #[default]
    SourceAveraged,
    /// Every cross-source replicate pair individually.
    Naive,
    /// A seeded uniform subsample of the naive scores, sized to the match sample.
    Downsampled { seed: u64 },
}

impl AggregationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationMode::SourceAveraged => "source-averaged",
            AggregationMode::Naive => "naive",
            AggregationMode::Downsampled { .. } => "downsampled",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            AggregationMode::Downsampled { seed } => Some(*seed),
            _ => None,
        }
    }

    pub fn from_parts(name: &str, seed: Option<u64>) -> Result<Self, String> {
        match (name, seed) {
            ("source-averaged", _) => Ok(AggregationMode::SourceAveraged),
            ("naive", _) => Ok(AggregationMode::Naive),
            ("downsampled", Some(seed)) => Ok(AggregationMode::Downsampled { seed }),
            ("downsampled", None) => Err("downsampled mode requires an explicit seed".into()),
            (other, _) => Err(format!("unknown aggregation mode {other:?}")),
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSample {
    pub km_scores: Vec<f64>,
    pub knm_scores: Vec<f64>,
    pub mode: AggregationMode,
}

impl ScoreSample {
    pub fn is_small(&self) -> bool {
        self.km_scores.len() < MIN_RELIABLE_PER_CLASS || self.knm_scores.len() < MIN_RELIABLE_PER_CLASS
    }

    /// `class,score` rows, known matches first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,score\n");
        for s in &self.km_scores {
            let _ = writeln!(out, "km,{s}");
        }
        for s in &self.knm_scores {
            let _ = writeln!(out, "knm,{s}");
        }
        out
    }
}

/// Groups matrix indices by source, in source order.
pub fn group_by_source(sim: &SimilarityMatrix) -> BTreeMap<SourceId, Vec<usize>> {
    let mut groups: BTreeMap<SourceId, Vec<usize>> = BTreeMap::new();
    for (i, label) in sim.labels().iter().enumerate() {
        groups.entry(label.source()).or_default().push(i);
    }
    groups
}

/// Splits the off-diagonal scores into known-match (same source) and
/// known-non-match (different sources) samples.
pub fn collect_scores(sim: &SimilarityMatrix, mode: AggregationMode) -> Result<ScoreSample, DensityError> {
    let groups: Vec<Vec<usize>> = group_by_source(sim).into_values().collect();
    if groups.len() < 2 {
        return Err(DensityError::TooFewSources(groups.len()));
    }
    let mut km_scores = Vec::new();
    for members in &groups {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                km_scores.push(sim.get(i, j));
            }
        }
    }
    if km_scores.is_empty() {
        return Err(DensityError::EmptyKnownMatch);
    }

    let mut knm_scores = Vec::new();
    for (s, first) in groups.iter().enumerate() {
        for second in &groups[s + 1..] {
            let cross = first.iter().flat_map(|&i| second.iter().map(move |&j| (i, j)));
            match mode {
                AggregationMode::SourceAveraged => {
                    let total: f64 = cross.map(|(i, j)| sim.get(i, j)).sum();
                    knm_scores.push(total / (first.len() * second.len()) as f64);
                }
                _ => knm_scores.extend(cross.map(|(i, j)| sim.get(i, j))),
            }
        }
    }
    if let AggregationMode::Downsampled { seed } = mode {
        let needed = km_scores.len();
        if knm_scores.len() < needed {
            return Err(DensityError::NotEnoughNonMatch { needed, found: knm_scores.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, knm_scores.len(), needed).into_vec();
        picked.sort_unstable();
        knm_scores = picked.into_iter().map(|i| knm_scores[i]).collect();
    }
    Ok(ScoreSample { km_scores, knm_scores, mode })
}

pub fn clamp_score(x: f64) -> f64 {
    x.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Beta density parameters together with the moments they were matched to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaFit {
    pub alpha: f64,
    pub beta: f64,
    pub sample_mean: f64,
    pub sample_var: f64,
}

impl BetaFit {
    /// Method of moments: `t = m(1-m)/v - 1`, `alpha = m t`, `beta = (1-m) t`.
    pub fn from_moments(mean: f64, var: f64) -> Result<Self, DensityError> {
        if !(mean > 0.0 && mean < 1.0 && var > 0.0 && var < mean * (1.0 - mean)) {
            return Err(DensityError::Infeasible { mean, var });
        }
        let t = mean * (1.0 - mean) / var - 1.0;
        Ok(BetaFit { alpha: mean * t, beta: (1.0 - mean) * t, sample_mean: mean, sample_var: var })
    }

    /// A fit with the given parameters; the recorded moments are the analytic ones.
    pub fn from_params(alpha: f64, beta: f64) -> Result<Self, DensityError> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(DensityError::Model(format!("alpha and beta must be positive, got {alpha}, {beta}")));
        }
        let s = alpha + beta;
        Ok(BetaFit { alpha, beta, sample_mean: alpha / s, sample_var: alpha * beta / (s * s * (s + 1.0)) })
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }

    /// `(alpha-1)/(alpha+beta-2)` for an interior mode, else the mean.
    pub fn mode(&self) -> f64 {
        if self.alpha > 1.0 && self.beta > 1.0 {
            (self.alpha - 1.0) / (self.alpha + self.beta - 2.0)
        } else {
            self.mean()
        }
    }

    fn ln_beta_fn(&self) -> f64 {
        ln_gamma(self.alpha) + ln_gamma(self.beta) - ln_gamma(self.alpha + self.beta)
    }

    /// Log density for `x` in `(0, 1)`; no domain check.
    pub fn ln_pdf_unchecked(&self, x: f64) -> f64 {
        (self.alpha - 1.0) * x.ln() + (self.beta - 1.0) * (-x).ln_1p() - self.ln_beta_fn()
    }

    pub fn ln_pdf(&self, x: f64) -> Result<f64, DensityError> {
        if !(x > 0.0 && x < 1.0) {
            return Err(DensityError::OutOfDomain(x));
        }
        Ok(self.ln_pdf_unchecked(x))
    }
}

/// Fits a Beta density to scores (clamped into the open unit interval) by
/// matching the sample mean and the unbiased sample variance.
pub fn fit_beta(scores: &[f64]) -> Result<BetaFit, DensityError> {
    if scores.len() < 3 {
        return Err(DensityError::TooFewScores(scores.len()));
    }
    let n = scores.len() as f64;
    let clamped: Vec<f64> = scores.iter().map(|&s| clamp_score(s)).collect();
    let mean = clamped.iter().sum::<f64>() / n;
    let var = clamped.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    BetaFit::from_moments(mean, var)
}

pub fn beta_pdf(fit: &BetaFit, x: f64) -> Result<f64, DensityError> {
    Ok(fit.ln_pdf(x)?.exp())
}

/// Score where the two fitted densities cross, found by bisection of
/// `ln f_km - ln f_knm` between the non-match mode and the match mode.
pub fn intersection_threshold(km: &BetaFit, knm: &BetaFit) -> Result<f64, DensityError> {
    if km.mean() <= knm.mean() {
        return Err(DensityError::NotSeparated { km: km.mean(), knm: knm.mean() });
    }
    let g = |x: f64| km.ln_pdf_unchecked(x) - knm.ln_pdf_unchecked(x);
    let (mut lo, mut hi) = (clamp_score(knm.mode()), clamp_score(km.mode()));
    let (g_lo, g_hi) = (g(lo), g(hi));
    if !(lo < hi && g_lo < 0.0 && g_hi > 0.0) {
        return Err(DensityError::NoSignChange { lo, hi });
    }
    while hi - lo > BISECTION_WIDTH {
        let mid = 0.5 * (lo + hi);
        let v = g(mid);
        if v == 0.0 {
            return Ok(mid);
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A trained model: both fits, the crossing threshold and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDensities {
    pub km_fit: BetaFit,
    pub knm_fit: BetaFit,
    pub threshold: f64,
    pub mode: AggregationMode,
    pub n_km: usize,
    pub n_knm: usize,
}

impl ScoreDensities {
    pub fn from_fits(
        km_fit: BetaFit,
        knm_fit: BetaFit,
        mode: AggregationMode,
        n_km: usize,
        n_knm: usize,
    ) -> Result<Self, DensityError> {
        let threshold = intersection_threshold(&km_fit, &knm_fit)?;
        Ok(ScoreDensities { km_fit, knm_fit, threshold, mode, n_km, n_knm })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from(self)).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DensityError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| DensityError::Model(e.to_string()))?;
        let mode = AggregationMode::from_parts(&file.mode, file.seed).map_err(DensityError::Model)?;
        let km_fit = BetaFit::from_params(file.km.alpha, file.km.beta)?;
        let knm_fit = BetaFit::from_params(file.knm.alpha, file.knm.beta)?;
        if !(file.threshold > 0.0 && file.threshold < 1.0) {
            return Err(DensityError::Model(format!("threshold {} outside (0, 1)", file.threshold)));
        }
        Ok(ScoreDensities { km_fit, knm_fit, threshold: file.threshold, mode, n_km: file.n_km, n_knm: file.n_knm })
    }
}

/// Fits both classes of a sample and locates the threshold.
pub fn fit_densities(sample: &ScoreSample) -> Result<ScoreDensities, DensityError> {
    let km_fit = fit_beta(&sample.km_scores)?;
    let knm_fit = fit_beta(&sample.knm_scores)?;
    ScoreDensities::from_fits(km_fit, knm_fit, sample.mode, sample.km_scores.len(), sample.knm_scores.len())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct BetaParams {
    alpha: f64,
    beta: f64,
}

/// On-disk model layout.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    mode: String,
    km: BetaParams,
    knm: BetaParams,
    threshold: f64,
    n_km: usize,
    n_knm: usize,
    seed: Option<u64>,
}

impl From<&ScoreDensities> for ModelFile {
    fn from(m: &ScoreDensities) -> Self {
        ModelFile {
            mode: m.mode.name().to_string(),
            km: BetaParams { alpha: m.km_fit.alpha, beta: m.km_fit.beta },
            knm: BetaParams { alpha: m.knm_fit.alpha, beta: m.knm_fit.beta },
            threshold: m.threshold,
            n_km: m.n_km,
            n_knm: m.n_knm,
            seed: m.mode.seed(),
        }
    }
}

impl FromStr for AggregationMode {
    type Err = String;
    /// Parses `source-averaged`, `naive` or `downsampled:<seed>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some((name, seed)) => {
                let seed = seed.parse().map_err(|_| format!("bad seed {seed:?}"))?;
                Self::from_parts(name, Some(seed))
            }
            None => Self::from_parts(s, None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{Side, SourceMeta};

    /// `sources` sources with `reps` replicates each; score 0.9 within a
    /// source, 0.2 + 0.01 * (i + j) across.
    fn toy_matrix(sources: u32, reps: u32) -> SimilarityMatrix {
        toy_matrix_uneven(&vec![reps; sources as usize])
    }

    fn toy_matrix_uneven(reps: &[u32]) -> SimilarityMatrix {
        let labels: Vec<SourceMeta> = reps
            .iter()
            .zip(1..)
            .flat_map(|(&n, t)| (1..=n).map(move |r| SourceMeta::new(t, Side::A, r).unwrap()))
            .collect();
        let n = labels.len();
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                scores[i * n + j] = if i == j {
                    1.0
                } else if labels[i].source() == labels[j].source() {
                    0.9
                } else {
                    0.2 + 0.01 * (i + j) as f64
                };
            }
        }
        SimilarityMatrix::from_scores(labels, scores).unwrap()
    }

    #[test]
    fn counts_two_by_two() {
        let m = toy_matrix(2, 2);
        let s = collect_scores(&m, AggregationMode::SourceAveraged).unwrap();
        assert_eq!(s.km_scores.len(), 2);
        assert_eq!(s.knm_scores.len(), 1);
        // mean of (0,2) (0,3) (1,2) (1,3)
        let want = (0.22 + 0.23 + 0.23 + 0.24) / 4.0;
        assert!((s.knm_scores[0] - want).abs() < 1e-12);
        let naive = collect_scores(&m, AggregationMode::Naive).unwrap();
        assert_eq!(naive.knm_scores.len(), 4);
        assert_eq!(naive.km_scores, s.km_scores);
    }

    #[test]
    fn downsampled_matches_km_count_and_is_seeded() {
        let m = toy_matrix(4, 3);
        let a = collect_scores(&m, AggregationMode::Downsampled { seed: 7 }).unwrap();
        assert_eq!(a.km_scores.len(), 12);
        assert_eq!(a.knm_scores.len(), 12);
        let b = collect_scores(&m, AggregationMode::Downsampled { seed: 7 }).unwrap();
        assert_eq!(a, b);
        let naive = collect_scores(&m, AggregationMode::Naive).unwrap();
        assert!(a.knm_scores.iter().all(|s| naive.knm_scores.contains(s)));
    }

    #[test]
    fn collect_errors() {
        assert_eq!(collect_scores(&toy_matrix(1, 4), AggregationMode::Naive), Err(DensityError::TooFewSources(1)));
        assert_eq!(collect_scores(&toy_matrix(3, 1), AggregationMode::Naive), Err(DensityError::EmptyKnownMatch));
        // one large source, two singletons: 15 KM pairs but only 13 cross pairs
        assert!(collect_scores(&toy_matrix(2, 4), AggregationMode::Downsampled { seed: 1 }).is_ok());
        assert!(matches!(
            collect_scores(&toy_matrix_uneven(&[6, 1, 1]), AggregationMode::Downsampled { seed: 1 }),
            Err(DensityError::NotEnoughNonMatch { .. })
        ));
    }

    #[test]
    fn symmetric_moments() {
        let f = BetaFit::from_moments(0.5, 0.05).unwrap();
        assert!((f.alpha - 2.0).abs() < 1e-12);
        assert!((f.beta - 2.0).abs() < 1e-12);
        assert!(matches!(BetaFit::from_moments(0.9, 0.2), Err(DensityError::Infeasible { .. })));
        assert!(BetaFit::from_moments(0.0, 0.01).is_err());
        assert!(BetaFit::from_moments(0.5, 0.0).is_err());
    }

    #[test]
    fn fit_beta_uses_unbiased_variance_and_clamps() {
        let f = fit_beta(&[0.2, 0.4, 0.6]).unwrap();
        assert!((f.sample_mean - 0.4).abs() < 1e-15);
        assert!((f.sample_var - 0.04).abs() < 1e-15);
        let with_one = fit_beta(&[1.0, 0.5, 0.7, 0.9]).unwrap();
        assert!(with_one.alpha.is_finite());
        assert_eq!(fit_beta(&[0.5, 0.6]), Err(DensityError::TooFewScores(2)));
        assert!(fit_beta(&[0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn pdf_values() {
        let uniform = BetaFit::from_params(1.0, 1.0).unwrap();
        for x in [0.01, 0.3, 0.77] {
            assert!((beta_pdf(&uniform, x).unwrap() - 1.0).abs() < 1e-12);
        }
        let b22 = BetaFit::from_params(2.0, 2.0).unwrap();
        assert!((beta_pdf(&b22, 0.5).unwrap() - 1.5).abs() < 1e-12);
        assert!(beta_pdf(&b22, 0.0).is_err());
        assert!(beta_pdf(&b22, 1.0).is_err());
    }

    #[test]
    fn mirror_threshold_and_degenerate_cases() {
        let knm = BetaFit::from_params(2.0, 5.0).unwrap();
        let km = BetaFit::from_params(5.0, 2.0).unwrap();
        let t = intersection_threshold(&km, &knm).unwrap();
        assert!((t - 0.5).abs() < 1e-9);
        assert!(intersection_threshold(&km, &km).is_err());
        assert!(matches!(intersection_threshold(&knm, &km), Err(DensityError::NotSeparated { .. })));
    }

    #[test]
    fn model_json_round_trip() {
        let km = BetaFit::from_params(15.7494, 2.0665).unwrap();
        let knm = BetaFit::from_params(8.5774, 11.4628).unwrap();
        let model = ScoreDensities::from_fits(km, knm, AggregationMode::Downsampled { seed: 3 }, 1120, 1120).unwrap();
        let text = model.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["mode"], "downsampled");
        assert_eq!(v["seed"], 3);
        assert_eq!(v["km"]["alpha"], 15.7494);
        let back = ScoreDensities::from_json(&text).unwrap();
        assert_eq!(back, model);
        assert!(ScoreDensities::from_json("{}").is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("naive".parse::<AggregationMode>().unwrap(), AggregationMode::Naive);
        assert_eq!("downsampled:9".parse::<AggregationMode>().unwrap(), AggregationMode::Downsampled { seed: 9 });
        assert!("downsampled".parse::<AggregationMode>().is_err());
        assert!("kde".parse::<AggregationMode>().is_err());
    }
}
