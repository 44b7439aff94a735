//! Independent reference implementations used as test oracles. Nothing
//! here shares code with the library beyond its public types.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, Continuous};
use striation::clustering::Dissimilarity;
use striation::meta::{Side, SourceMeta};
use striation::Signature;

pub fn sig(values: Vec<f64>) -> Signature {
    Signature::new(values, 3.45, SourceMeta::default()).unwrap()
}

pub fn sig_of(values: Vec<f64>, tool: u32, side: Side, rep: u32) -> Signature {
    Signature::new(values, 3.45, SourceMeta::new(tool, side, rep).unwrap()).unwrap()
}

pub fn white(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
}

/// Three-tap moving average of white noise: correlated neighbours, like a
/// real signature.
pub fn smooth(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w = white(n + 2, rng);
    (0..n).map(|i| w[i] + w[i + 1] + w[i + 2]).collect()
}

/// Pearson correlation of `a[i]` with `b[i + lag]` over the overlap, plain
/// two-pass sums. `None` when the overlap is empty or a window is constant.
pub fn pearson_at(a: &[f64], b: &[f64], lag: i64) -> Option<(f64, usize)> {
    let lo = 0.max(-lag);
    let hi = (a.len() as i64).min(b.len() as i64 - lag);
    if hi <= lo {
        return None;
    }
    let xs: Vec<f64> = (lo..hi).map(|i| a[i as usize]).collect();
    let ys: Vec<f64> = (lo..hi).map(|i| b[(i + lag) as usize]).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt(), xs.len()))
}

/// Exhaustive registration: every admissible lag, best correlation, ties to
/// the smallest |lag| and then the negative lag.
pub fn brute_force_align(a: &[f64], b: &[f64], max_lag_frac: f64) -> Option<(i64, f64)> {
    let (n, m) = (a.len(), b.len());
    let min_ov = 30usize.max(n.min(m).div_ceil(10));
    let max_lag = (max_lag_frac * n.max(m) as f64).floor() as i64;
    let mut best: Option<(i64, f64)> = None;
    for lag in -max_lag..=max_lag {
        let Some((r, ov)) = pearson_at(a, b, lag) else { continue };
        if ov < min_ov {
            continue;
        }
        let better = match best {
            None => true,
            Some((bl, br)) => r > br || (r == br && (lag.abs(), lag) < (bl.abs(), bl)),
        };
        if better {
            best = Some((lag, r));
        }
    }
    best
}

/// Minimum total cost over every k-subset of medoids.
pub fn exhaustive_pam_cost(d: &Dissimilarity, k: usize) -> f64 {
    let n = d.len();
    let mut best = f64::INFINITY;
    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        let cost: f64 = (0..n).map(|i| combo.iter().map(|&m| d.get(i, m)).fold(f64::INFINITY, f64::min)).sum();
        best = best.min(cost);
        // next combination in lexicographic order
        let mut i = k;
        while i > 0 && combo[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return best;
        }
        combo[i - 1] += 1;
        for j in i..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
}

pub fn random_dissimilarity(n: usize, rng: &mut ChaCha8Rng) -> Dissimilarity {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.random::<f64>();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Dissimilarity::new(n, d).unwrap()
}

pub fn beta_pdf_oracle(alpha: f64, beta: f64, x: f64) -> f64 {
    Beta::new(alpha, beta).unwrap().pdf(x)
}

/// Composite Simpson rule with `intervals` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
    let h = (hi - lo) / intervals as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// Dense-grid crossing of two Beta densities between their modes: the grid
/// point where `f1 - f2` changes sign.
pub fn grid_crossing(a1: f64, b1: f64, a2: f64, b2: f64, points: usize) -> Option<f64> {
    let mode = |a: f64, b: f64| (a - 1.0) / (a + b - 2.0);
    let (lo, hi) = (mode(a2, b2), mode(a1, b1));
    let mut prev: Option<(f64, f64)> = None;
    for i in 0..points {
        let x = (i as f64 + 0.5) / points as f64;
        if x < lo || x > hi {
            continue;
        }
        let diff = beta_pdf_oracle(a1, b1, x) - beta_pdf_oracle(a2, b2, x);
        if let Some((px, pd)) = prev {
            if pd < 0.0 && diff >= 0.0 {
                return Some(if diff.abs() < pd.abs() { x } else { px });
            }
        }
        prev = Some((x, diff));
    }
    None
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
