//! Score-based likelihood ratios, threshold classification and the verbal
//! equivalents of LR magnitudes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::{clamp_score, ScoreDensities};
use crate::extraction::Signature;
use crate::similarity::{similarity_score, SimilarityError};

/// `|log10 LR|` at or below this is reported as neutral.
pub const NEUTRAL_LOG10_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("likelihood ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    SupportsSameSource,
    SupportsDifferentSource,
    Neutral,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Decision::SupportsSameSource => "supports-same-source",
            Decision::SupportsDifferentSource => "supports-different-source",
            Decision::Neutral => "neutral",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    SameSource,
    DifferentSource,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Classification::SameSource => "same-source",
            Classification::DifferentSource => "different-source",
        })
    }
}

/// Strength band of an LR on the log10 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportBand {
    Equal,
    Weak,
    Moderate,
    ModeratelyStrong,
    Strong,
    VeryStrong,
}

impl SupportBand {
    pub fn phrase(&self) -> &'static str {
        match self {
            SupportBand::Equal => "equal support",
            SupportBand::Weak => "weak support",
            SupportBand::Moderate => "moderate support",
            SupportBand::ModeratelyStrong => "moderately strong support",
            SupportBand::Strong => "strong support",
            SupportBand::VeryStrong => "very strong support",
        }
    }
}

/// Which proposition an LR points to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Proposition {
    SameSource,
    DifferentSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalStatement {
    pub band: SupportBand,
    /// `None` for equal support.
    pub favors: Option<Proposition>,
}

impl fmt::Display for VerbalStatement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.favors {
            None => f.write_str(self.band.phrase()),
            Some(Proposition::SameSource) => write!(f, "{} for the same-source proposition", self.band.phrase()),
            Some(Proposition::DifferentSource) => {
                write!(f, "{} for the different-source proposition", self.band.phrase())
            }
        }
    }
}

/// Maps an LR to a band: `(1,10]` weak, `(10,100]` moderate, `(100,1000]`
/// moderately strong, `(1000,10000]` strong, above that very strong. LRs
/// below one use the reciprocal and favor the different-source proposition.
pub fn verbal_scale(lr: f64) -> Result<VerbalStatement, LikelihoodError> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(LikelihoodError::NonPositiveRatio(lr));
    }
    let log10 = lr.log10();
    if log10.abs() <= NEUTRAL_LOG10_TOLERANCE {
        return Ok(VerbalStatement { band: SupportBand::Equal, favors: None });
    }
    let magnitude = log10.abs();
    let band = if magnitude <= 1.0 {
        SupportBand::Weak
    } else if magnitude <= 2.0 {
        SupportBand::Moderate
    } else if magnitude <= 3.0 {
        SupportBand::ModeratelyStrong
    } else if magnitude <= 4.0 {
        SupportBand::Strong
    } else {
        SupportBand::VeryStrong
    };
    let favors = if log10 > 0.0 { Proposition::SameSource } else { Proposition::DifferentSource };
    Ok(VerbalStatement { band, favors: Some(favors) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrResult {
    pub score: f64,
    pub lr: f64,
    pub log10_lr: f64,
    pub decision: Decision,
    pub verbal: String,
}

/// `f_km(score) / f_knm(score)`, evaluated in log space. Scores at the ends
/// of `[0, 1]` are clamped into the open interval first.
pub fn likelihood_ratio(model: &ScoreDensities, score: f64) -> Result<LrResult, LikelihoodError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(LikelihoodError::ScoreOutOfRange(score));
    }
    let x = clamp_score(score);
    let ln_lr = model.km_fit.ln_pdf_unchecked(x) - model.knm_fit.ln_pdf_unchecked(x);
    let log10_lr = ln_lr / std::f64::consts::LN_10;
    let lr = ln_lr.exp();
    let decision = if log10_lr.abs() <= NEUTRAL_LOG10_TOLERANCE {
        Decision::Neutral
    } else if log10_lr > 0.0 {
        Decision::SupportsSameSource
    } else {
        Decision::SupportsDifferentSource
    };
    // verbal_scale needs a positive finite LR; work from log10 when exp overflows
    let verbal = match verbal_scale(lr) {
        Ok(v) if lr.is_finite() => v,
        _ => verbal_from_log10(log10_lr),
    };
    Ok(LrResult { score, lr, log10_lr, decision, verbal: verbal.to_string() })
}

fn verbal_from_log10(log10_lr: f64) -> VerbalStatement {
    VerbalStatement {
        band: SupportBand::VeryStrong,
        favors: Some(if log10_lr > 0.0 { Proposition::SameSource } else { Proposition::DifferentSource }),
    }
}

/// Same-source iff the score is strictly above the model threshold.
pub fn classify(model: &ScoreDensities, score: f64) -> Classification {
    classify_at(model.threshold, score)
}

pub fn classify_at(threshold: f64, score: f64) -> Classification {
    if score > threshold {
        Classification::SameSource
    } else {
        Classification::DifferentSource
    }
}

/// Scores a pair of signatures and evaluates the LR for that score.
pub fn compare_marks(a: &Signature, b: &Signature, model: &ScoreDensities) -> Result<(f64, LrResult), LikelihoodError> {
    let score = similarity_score(a, b)?;
    let result = likelihood_ratio(model, score)?;
    Ok((score, result))
}
