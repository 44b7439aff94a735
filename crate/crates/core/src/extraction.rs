//! Signature extraction: crop a profile, fit its macro structure with a
//! local quadratic regression and keep the residual.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::SourceMeta;
use crate::profile_io::Profile;

/// Smallest profile (after cropping) that the smoother accepts.
pub const MIN_WINDOW: usize = 10;

/// Default local-regression span.
pub const DEFAULT_SPAN: f64 = 0.75;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractionError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate local regression window at index {index}")]
    Degenerate { index: usize },
}

/// Detrended 1-D mark signature (micrometers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    values: Vec<f64>,
    pitch: f64,
    meta: SourceMeta,
}

impl Signature {
    pub fn new(values: Vec<f64>, pitch: f64, meta: SourceMeta) -> Result<Self, ExtractionError> {
        if values.len() < 2 {
            return Err(ExtractionError::Argument(format!("signature needs at least 2 samples, got {}", values.len())));
        }
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(ExtractionError::Argument(format!("pitch must be positive, got {pitch}")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ExtractionError::Argument(format!("non-finite value at index {i}")));
        }
        Ok(Signature { values, pitch, meta })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn meta(&self) -> &SourceMeta {
        &self.meta
    }

    /// Physical length in millimeters (`len * pitch`).
    pub fn length_mm(&self) -> f64 {
        self.values.len() as f64 * self.pitch / 1000.0
    }

    /// Central window of `len` samples. `len` is clamped to the signature length.
    pub fn central_window(&self, len: usize) -> (usize, Signature) {
        let len = len.clamp(2, self.values.len());
        let start = (self.values.len() - len) / 2;
        let values = self.values[start..start + len].to_vec();
        (start, Signature { values, pitch: self.pitch, meta: self.meta })
    }
}

impl From<Signature> for Profile {
    fn from(s: Signature) -> Profile {
        Profile::new(s.values, s.pitch, s.meta).expect("signature invariants imply profile invariants")
    }
}

/// Keeps samples `[left, right)`.
pub fn crop(profile: &Profile, left: usize, right: usize) -> Result<Profile, ExtractionError> {
    let n = profile.len();
    if left >= right || right > n {
        return Err(ExtractionError::Argument(format!(
            "crop bounds [{left}, {right}) invalid for profile of length {n}"
        )));
    }
    if right - left < MIN_WINDOW {
        return Err(ExtractionError::Argument(format!(
            "crop window of {} samples is below the minimum of {MIN_WINDOW}",
            right - left
        )));
    }
    Profile::new(profile.values()[left..right].to_vec(), profile.pitch(), *profile.meta())
        .map_err(|e| ExtractionError::Argument(e.to_string()))
}

/// Locally weighted quadratic regression (tricube kernel) evaluated at every
/// sample. Each local fit uses the `ceil(span * n)` nearest samples; the
/// bandwidth is the distance to the farthest of them, which therefore gets
/// zero weight.
pub fn smooth_local_regression(profile: &Profile, span: f64) -> Result<Vec<f64>, ExtractionError> {
    loess_quadratic(profile.values(), span)
}

pub(crate) fn loess_quadratic(y: &[f64], span: f64) -> Result<Vec<f64>, ExtractionError> {
    let n = y.len();
    if n < MIN_WINDOW {
        return Err(ExtractionError::Argument(format!(
            "local regression needs at least {MIN_WINDOW} samples, got {n}"
        )));
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(ExtractionError::Argument(format!("span must be in (0, 1], got {span}")));
    }
    let q = ((span * n as f64).ceil() as usize).clamp(1, n);

    let mut fitted = Vec::with_capacity(n);
    let mut kernel: Vec<f64> = Vec::new();
    let mut kernel_bw = usize::MAX;
    for i in 0..n {
        let bw = neighbor_distance(i, n, q);
        if bw == 0 {
            return Err(ExtractionError::Degenerate { index: i });
        }
        if bw != kernel_bw {
            kernel = (0..=bw)
                .map(|k| {
                    let u = k as f64 / bw as f64;
                    let t = 1.0 - u * u * u;
                    t * t * t
                })
                .collect();
            kernel_bw = bw;
        }
        let lo = i.saturating_sub(bw);
        let hi = (i + bw).min(n - 1);
        let inv_bw = 1.0 / bw as f64;
        // weighted moments of u = (j - i) / bw
        let mut m = [0.0f64; 5];
        let mut t = [0.0f64; 3];
        for (j, &yj) in y.iter().enumerate().take(hi + 1).skip(lo) {
            let w = kernel[j.abs_diff(i)];
            if w == 0.0 {
                continue;
            }
            let u = (j as f64 - i as f64) * inv_bw;
            let wu = w * u;
            let wu2 = wu * u;
            m[0] += w;
            m[1] += wu;
            m[2] += wu2;
            m[3] += wu2 * u;
            m[4] += wu2 * u * u;
            t[0] += w * yj;
            t[1] += wu * yj;
            t[2] += wu2 * yj;
        }
        let a = [[m[0], m[1], m[2]], [m[1], m[2], m[3]], [m[2], m[3], m[4]]];
        let coef = solve3(a, t).ok_or(ExtractionError::Degenerate { index: i })?;
        fitted.push(coef[0]);
    }
    Ok(fitted)
}

/// Distance (in samples) from `i` to its `q`-th nearest neighbor, counting
/// `i` itself as the first.
fn neighbor_distance(i: usize, n: usize, q: usize) -> usize {
    let left = i;
    let right = n - 1 - i;
    // smallest d with 1 + min(d, left) + min(d, right) >= q
    let need = q - 1;
    let short = left.min(right);
    if 2 * short >= need {
        need.div_ceil(2)
    } else {
        need - short
    }
}

/// Gaussian elimination with partial pivoting on a 3x3 system.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    let tol = scale * 1e-12;
    for col in 0..3 {
        let piv = (col..3).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[piv][col].abs() <= tol {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            let pivot_row = a[col];
            for (v, p) in a[r].iter_mut().zip(pivot_row).skip(col) {
                *v -= f * p;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let mut s = b[r];
        for c in r + 1..3 {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    Some(x)
}

/// Residual of the profile about its local-regression fit, mean-centered.
pub fn extract_signature(profile: &Profile, span: f64) -> Result<Signature, ExtractionError> {
    let fitted = smooth_local_regression(profile, span)?;
    let mut values: Vec<f64> = profile.values().iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= mean);
    Signature::new(values, profile.pitch(), *profile.meta())
}
