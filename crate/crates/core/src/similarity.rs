//! Registration of signature pairs and the normalized cross-correlation score.
//!
//! Two signatures are aligned by sliding one over the other and taking the lag
//! with the highest Pearson correlation over the overlapping samples. The
//! correlation at each lag uses the means and standard deviations of that
//! overlap only; nothing is zero-padded.
//!
//! The lag scan is done in two stages. Cross products for every lag come from
//! one FFT cross-correlation and window sums from prefix sums, which gives an
//! approximate correlation per lag together with a rounding-error bound. Every
//! lag whose bound reaches the best lower bound is then recomputed directly,
//! two-pass, and the winner is chosen among those exact values. The reported
//! correlation is therefore the exact overlap correlation at the exact argmax.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::Signature;
use crate::meta::SourceMeta;

/// Default maximum |lag| as a fraction of the longer signature.
pub const DEFAULT_MAX_LAG_FRAC: f64 = 0.9;
/// Absolute floor of the minimum overlap, in samples.
pub const MIN_OVERLAP_SAMPLES: usize = 30;
/// Relative pitch mismatch tolerated between compared signatures.
pub const PITCH_TOLERANCE: f64 = 0.01;

// Windows whose centered sum of squares falls below this fraction of their
// raw sum of squares are treated as constant.
const REL_VARIANCE_FLOOR: f64 = 1e-20;
// Generous per-operation rounding scale for the FFT/prefix-sum screen.
const SCREEN_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("pitch mismatch: {0} vs {1} micrometers")]
    PitchMismatch(f64, f64),
    #[error("signature of {len} samples is shorter than the minimum overlap of {min}")]
    TooShort { len: usize, min: usize },
    #[error("no lag satisfies the overlap constraint")]
    NoValidLag,
    #[error("overlap has zero variance at every admissible lag")]
    ZeroVariance,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("comparison of signatures {i} and {j} failed: {source}")]
    Pair {
        i: usize,
        j: usize,
        #[source]
        source: Box<SimilarityError>,
    },
}

/// Result of registering `b` against `a`: sample `a[i]` is paired with
/// `b[i + lag]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub lag: i64,
    pub overlap_len: usize,
    pub ccf_raw: f64,
    pub score: f64,
}

/// `max(30, ceil(10% of the shorter length))`.
pub fn min_overlap(len_a: usize, len_b: usize) -> usize {
    MIN_OVERLAP_SAMPLES.max(len_a.min(len_b).div_ceil(10))
}

/// Maps a Pearson correlation onto `[0, 1]`.
pub fn ccf_to_score(ccf: f64) -> f64 {
    (ccf + 1.0) / 2.0
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(size: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(size), p.plan_fft_inverse(size))
    })
}

fn fft_size(n: usize, m: usize) -> usize {
    (n + m - 1).next_power_of_two()
}

/// A signature with the prefix sums and (optionally) the spectrum needed by
/// the lag scan. Preparing once and comparing many times avoids recomputing
/// the forward transform per pair.
#[derive(Debug, Clone)]
pub struct PreparedSignature {
    values: Vec<f64>,
    pitch: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    spectrum: Option<(usize, Vec<Complex<f64>>)>,
}

impl PreparedSignature {
    pub fn new(sig: &Signature) -> Self {
        Self::from_values(sig.values().to_vec(), sig.pitch())
    }

    /// Also caches the spectrum for comparisons against partners of
    /// `partner_len` samples.
    pub fn with_partner_len(sig: &Signature, partner_len: usize) -> Self {
        let mut p = Self::new(sig);
        let size = fft_size(p.values.len(), partner_len);
        p.spectrum = Some((size, p.compute_spectrum(size)));
        p
    }

    fn from_values(values: Vec<f64>, pitch: f64) -> Self {
        let mut sum = Vec::with_capacity(values.len() + 1);
        let mut sum_sq = Vec::with_capacity(values.len() + 1);
        let (mut s, mut s2) = (0.0, 0.0);
        sum.push(0.0);
        sum_sq.push(0.0);
        for v in &values {
            s += v;
            s2 += v * v;
            sum.push(s);
            sum_sq.push(s2);
        }
        PreparedSignature { values, pitch, sum, sum_sq, spectrum: None }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn energy(&self) -> f64 {
        *self.sum_sq.last().unwrap()
    }

    fn compute_spectrum(&self, size: usize) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = self.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        plans(size).0.process(&mut buf);
        buf
    }

    fn spectrum(&self, size: usize) -> std::borrow::Cow<'_, [Complex<f64>]> {
        match &self.spectrum {
            Some((s, spec)) if *s == size => std::borrow::Cow::Borrowed(spec),
            _ => std::borrow::Cow::Owned(self.compute_spectrum(size)),
        }
    }
}

fn check_pair(a: &PreparedSignature, b: &PreparedSignature, max_lag_frac: f64) -> Result<usize, SimilarityError> {
    if !(max_lag_frac > 0.0 && max_lag_frac <= 1.0) {
        return Err(SimilarityError::Argument(format!("max_lag_frac must be in (0, 1], got {max_lag_frac}")));
    }
    if (a.pitch - b.pitch).abs() > PITCH_TOLERANCE * a.pitch.max(b.pitch) {
        return Err(SimilarityError::PitchMismatch(a.pitch, b.pitch));
    }
    let min_ov = min_overlap(a.len(), b.len());
    for len in [a.len(), b.len()] {
        if len < min_ov {
            return Err(SimilarityError::TooShort { len, min: min_ov });
        }
    }
    Ok(min_ov)
}

/// Registers `b` against `a`, searching every integer lag with
/// `|lag| <= max_lag_frac * max(len_a, len_b)` whose overlap is at least
/// [`min_overlap`]. Ties go to the smallest `|lag|`, then to the negative lag.
pub fn align(a: &Signature, b: &Signature, max_lag_frac: f64) -> Result<Alignment, SimilarityError> {
    align_prepared(&PreparedSignature::new(a), &PreparedSignature::new(b), max_lag_frac)
}

pub fn align_prepared(
    a: &PreparedSignature,
    b: &PreparedSignature,
    max_lag_frac: f64,
) -> Result<Alignment, SimilarityError> {
    let min_ov = check_pair(a, b, max_lag_frac)?;
    let max_lag = (max_lag_frac * a.len().max(b.len()) as f64).floor() as i64;
    // The longer signature stays fixed; equal lengths keep argument order.
    let swapped = b.len() > a.len();
    let (fixed, moving) = if swapped { (b, a) } else { (a, b) };
    let (n, m) = (fixed.len() as i64, moving.len() as i64);
    let lo = (min_ov as i64 - n).max(-max_lag);
    let hi = (m - min_ov as i64).min(max_lag);
    if lo > hi {
        return Err(SimilarityError::NoValidLag);
    }

    let candidates = screen_lags(fixed, moving, lo, hi);
    let mut best: Option<(i64, f64, usize)> = None;
    for lag in candidates {
        let Some((r, ov)) = exact_correlation(&fixed.values, &moving.values, lag) else {
            continue;
        };
        let reported = if swapped { -lag } else { lag };
        let better = match best {
            None => true,
            Some((bl, br, _)) => r > br || (r == br && tie_preferred(reported, bl)),
        };
        if better {
            best = Some((reported, r, ov));
        }
    }
    let (lag, r, overlap_len) = best.ok_or(SimilarityError::ZeroVariance)?;
    Ok(Alignment { lag, overlap_len, ccf_raw: r, score: ccf_to_score(r) })
}

fn tie_preferred(candidate: i64, current: i64) -> bool {
    (candidate.abs(), candidate) < (current.abs(), current)
}

fn overlap_bounds(n: usize, m: usize, lag: i64) -> (usize, usize) {
    let i0 = (-lag).max(0) as usize;
    let i1 = (n as i64).min(m as i64 - lag) as usize;
    (i0, i1)
}

/// Two-pass Pearson correlation over the overlap at `lag`, or `None` when
/// either side is constant there.
fn exact_correlation(x: &[f64], y: &[f64], lag: i64) -> Option<(f64, usize)> {
    let (i0, i1) = overlap_bounds(x.len(), y.len(), lag);
    let xs = &x[i0..i1];
    let ys = &y[(i0 as i64 + lag) as usize..(i1 as i64 + lag) as usize];
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let (mut sxx, mut syy, mut sxy, mut rxx, mut ryy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&u, &v) in xs.iter().zip(ys) {
        let (du, dv) = (u - mx, v - my);
        sxx += du * du;
        syy += dv * dv;
        sxy += du * dv;
        rxx += u * u;
        ryy += v * v;
    }
    if sxx <= REL_VARIANCE_FLOOR * rxx || syy <= REL_VARIANCE_FLOOR * ryy {
        return None;
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Some((r, xs.len()))
}

/// Lags in `[lo, hi]` that may hold the maximum correlation.
fn screen_lags(fixed: &PreparedSignature, moving: &PreparedSignature, lo: i64, hi: i64) -> Vec<i64> {
    let (n, m) = (fixed.len(), moving.len());
    let size = fft_size(n, m);
    let fx = fixed.spectrum(size);
    let fy = moving.spectrum(size);
    let mut cross: Vec<Complex<f64>> = fx.iter().zip(fy.iter()).map(|(x, y)| x.conj() * y).collect();
    plans(size).1.process(&mut cross);
    let inv_size = 1.0 / size as f64;

    let (ex, ey) = (fixed.energy(), moving.energy());
    let cov_err = SCREEN_EPS * (ex * ey).sqrt();
    let (vx_err, vy_err) = (SCREEN_EPS * ex, SCREEN_EPS * ey);

    let count = (hi - lo + 1) as usize;
    // (approximate r, error bound); NaN marks a lag that must be recomputed
    let mut approx = Vec::with_capacity(count);
    let mut best_lower = f64::NEG_INFINITY;
    for lag in lo..=hi {
        let (i0, i1) = overlap_bounds(n, m, lag);
        let (j0, j1) = ((i0 as i64 + lag) as usize, (i1 as i64 + lag) as usize);
        let k = (i1 - i0) as f64;
        let sx = fixed.sum[i1] - fixed.sum[i0];
        let sy = moving.sum[j1] - moving.sum[j0];
        let vx = fixed.sum_sq[i1] - fixed.sum_sq[i0] - sx * sx / k;
        let vy = moving.sum_sq[j1] - moving.sum_sq[j0] - sy * sy / k;
        if vx <= 10.0 * vx_err || vy <= 10.0 * vy_err {
            approx.push((f64::NAN, 0.0));
            continue;
        }
        let idx = if lag >= 0 { lag as usize } else { size - (-lag) as usize };
        let sxy = cross[idx].re * inv_size;
        let denom = (vx * vy).sqrt();
        let r = (sxy - sx * sy / k) / denom;
        let err = cov_err / denom + 0.5 * (vx_err / vx + vy_err / vy) + SCREEN_EPS;
        best_lower = best_lower.max(r - err);
        approx.push((r, err));
    }
    approx
        .iter()
        .enumerate()
        .filter(|(_, &(r, err))| r.is_nan() || r + err >= best_lower)
        .map(|(i, _)| lo + i as i64)
        .collect()
}

/// Alignment score with the default lag bound.
pub fn similarity_score(a: &Signature, b: &Signature) -> Result<f64, SimilarityError> {
    Ok(align(a, b, DEFAULT_MAX_LAG_FRAC)?.score)
}

/// Symmetric matrix of similarity scores with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    labels: Vec<SourceMeta>,
    scores: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from a row-major score table, checking the invariants.
    pub fn from_scores(labels: Vec<SourceMeta>, scores: Vec<f64>) -> Result<Self, SimilarityError> {
        let n = labels.len();
        if scores.len() != n * n {
            return Err(SimilarityError::Argument(format!("expected {} scores, got {}", n * n, scores.len())));
        }
        for i in 0..n {
            if scores[i * n + i] != 1.0 {
                return Err(SimilarityError::Argument(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                let s = scores[i * n + j];
                if !(0.0..=1.0).contains(&s) {
                    return Err(SimilarityError::Argument(format!("score ({i},{j}) = {s} outside [0,1]")));
                }
                if s != scores[j * n + i] {
                    return Err(SimilarityError::Argument(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(SimilarityMatrix { labels, scores })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[SourceMeta] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.len() + j]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Restriction to the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> SimilarityMatrix {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let scores =
            indices.iter().flat_map(|&i| indices.iter().map(move |&j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        SimilarityMatrix { labels, scores }
    }

    /// Square CSV with a label header row and a label first column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            let _ = write!(out, "{l}");
            for j in 0..self.len() {
                let _ = write!(out, ",{}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }

    /// Long-form CSV, one `label_i,label_j,score` row per ordered pair.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("label_i,label_j,score\n");
        for (i, li) in self.labels.iter().enumerate() {
            for (j, lj) in self.labels.iter().enumerate() {
                let _ = writeln!(out, "{li},{lj},{}", self.get(i, j));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, SimilarityError> {
        let bad = |msg: String| SimilarityError::Argument(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty matrix file".into()))?;
        let labels = header
            .split(',')
            .skip(1)
            .map(|s| s.trim().parse::<SourceMeta>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut scores = Vec::with_capacity(labels.len() * labels.len());
        for (row, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let label = cells.next().unwrap_or("").trim();
            if row >= labels.len() || label != labels[row].to_string() {
                return Err(bad(format!("row {} label {label:?} does not match header", row + 1)));
            }
            for cell in cells {
                scores.push(cell.trim().parse::<f64>().map_err(|_| bad(format!("bad score {cell:?}")))?);
            }
        }
        Self::from_scores(labels, scores)
    }
}

/// All pairwise similarity scores. Pairs are independent tasks writing
/// disjoint cells, so the result does not depend on scheduling.
pub fn similarity_matrix(collection: &[Signature]) -> Result<SimilarityMatrix, SimilarityError> {
    let n = collection.len();
    if n < 2 {
        return Err(SimilarityError::Argument(format!("need at least 2 signatures, got {n}")));
    }
    let max_len = collection.iter().map(Signature::len).max().unwrap();
    let prepared: Vec<PreparedSignature> =
        collection.par_iter().map(|s| PreparedSignature::with_partner_len(s, max_len)).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let upper: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            align_prepared(&prepared[i], &prepared[j], DEFAULT_MAX_LAG_FRAC)
                .map(|a| a.score)
                .map_err(|e| SimilarityError::Pair { i, j, source: Box::new(e) })
        })
        .collect::<Result<_, _>>()?;
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        scores[i * n + i] = 1.0;
    }
    for (&(i, j), &s) in pairs.iter().zip(&upper) {
        scores[i * n + j] = s;
        scores[j * n + i] = s;
    }
    Ok(SimilarityMatrix { labels: collection.iter().map(|s| *s.meta()).collect(), scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sig(values: Vec<f64>) -> Signature {
        Signature::new(values, 3.45, SourceMeta::default()).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    #[test]
    fn self_alignment_is_perfect() {
        let s = sig(noise(300, 1));
        let a = align(&s, &s, 0.9).unwrap();
        assert_eq!(a.lag, 0);
        assert_eq!(a.overlap_len, 300);
        assert!((a.ccf_raw - 1.0).abs() < 1e-12);
        assert!((a.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forced_zero_lag_anticorrelation() {
        let v = noise(200, 2);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let a = align(&sig(v), &sig(neg), 1e-6).unwrap();
        assert_eq!(a.lag, 0);
        assert!((a.ccf_raw + 1.0).abs() < 1e-12);
        assert!(a.score.abs() < 1e-12);
    }

    #[test]
    fn recovers_known_shift() {
        let base = noise(600, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // b[i + 25] = a[i]
        let shifted: Vec<f64> = (0..600)
            .map(|i| {
                let v = if i >= 25 { base[i - 25] } else { rng.random::<f64>() - 0.5 };
                v + 0.02 * (rng.random::<f64>() - 0.5)
            })
            .collect();
        let a = align(&sig(base.clone()), &sig(shifted.clone()), 0.9).unwrap();
        assert_eq!(a.lag, 25);
        assert!(a.ccf_raw >= 0.95);
        let back = align(&sig(shifted), &sig(base), 0.9).unwrap();
        assert_eq!(back.lag, -25);
        assert_eq!(back.ccf_raw, a.ccf_raw);
    }

    #[test]
    fn unequal_lengths_report_lag_in_argument_frame() {
        let long = noise(500, 5);
        let short = long[100..200].to_vec();
        // short[i + lag] == long[i] at lag -100
        let a = align(&sig(long.clone()), &sig(short.clone()), 0.9).unwrap();
        assert_eq!(a.lag, -100);
        assert_eq!(a.overlap_len, 100);
        let b = align(&sig(short), &sig(long), 0.9).unwrap();
        assert_eq!(b.lag, 100);
        assert_eq!(a.score, b.score);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = sig(noise(100, 6));
        let other_pitch = Signature::new(noise(100, 7), 4.0, SourceMeta::default()).unwrap();
        assert!(matches!(align(&s, &other_pitch, 0.9), Err(SimilarityError::PitchMismatch(..))));
        let tiny = sig(noise(20, 8));
        assert!(matches!(align(&s, &tiny, 0.9), Err(SimilarityError::TooShort { len: 20, min: 30 })));
        let flat = sig(vec![1.0; 100]);
        assert_eq!(align(&s, &flat, 0.9), Err(SimilarityError::ZeroVariance));
        assert!(align(&s, &s, 0.0).is_err());
        assert!(align(&s, &s, 1.5).is_err());
    }

    #[test]
    fn min_overlap_rule() {
        assert_eq!(min_overlap(100, 2000), 30);
        assert_eq!(min_overlap(1739, 1739), 174);
        assert_eq!(min_overlap(301, 5000), 31);
    }

    #[test]
    fn matrix_of_identical_pair() {
        let s = sig(noise(120, 9));
        let m = similarity_matrix(&[s.clone(), s]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.get(i, j) - 1.0).abs() < 1e-12);
            }
        }
        assert!(similarity_matrix(&[sig(noise(50, 1))]).is_err());
    }

    #[test]
    fn matrix_reports_failing_pair() {
        let s = sig(noise(120, 9));
        let flat = sig(vec![0.0; 120]);
        let err = similarity_matrix(&[s.clone(), s, flat]).unwrap_err();
        assert!(matches!(err, SimilarityError::Pair { i: 0, j: 2, .. }));
    }

    #[test]
    fn matrix_csv_round_trip() {
        let sigs: Vec<Signature> = (0..3)
            .map(|r| {
                let meta = SourceMeta::new(1, crate::meta::Side::A, r + 1).unwrap();
                Signature::new(noise(80, r as u64), 3.45, meta).unwrap()
            })
            .collect();
        let m = similarity_matrix(&sigs).unwrap();
        assert_eq!(SimilarityMatrix::from_csv(&m.to_csv()).unwrap(), m);
        assert_eq!(m.to_long_csv().lines().count(), 1 + 9);
        let sub = m.subset(&[2, 0]);
        assert_eq!(sub.get(0, 1), m.get(2, 0));
    }
}
