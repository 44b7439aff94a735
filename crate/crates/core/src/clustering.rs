//! k-medoids (PAM) clustering on `1 - similarity` and silhouette-based
//! selection of the number of clusters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::SourceMeta;
use crate::similarity::SimilarityMatrix;

/// Upper end of the default k search range.
pub const DEFAULT_K_MAX: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusteringError {
    #[error("k = {k} out of range for {n} points (need 2 <= k < n)")]
    KOutOfRange { k: usize, n: usize },
    #[error("invalid k range [{k_min}, {k_max}] for {n} points")]
    BadRange { k_min: usize, k_max: usize, n: usize },
    #[error("invalid dissimilarity matrix: {0}")]
    Matrix(String),
    #[error("invalid medoids: {0}")]
    Medoids(String),
}

/// Square symmetric dissimilarity matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Dissimilarity {
    n: usize,
    d: Vec<f64>,
}

impl Dissimilarity {
    pub fn new(n: usize, d: Vec<f64>) -> Result<Self, ClusteringError> {
        if d.len() != n * n {
            return Err(ClusteringError::Matrix(format!("expected {} entries, got {}", n * n, d.len())));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(ClusteringError::Matrix(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = d[i * n + j];
                if !(v >= 0.0 && v.is_finite()) || v != d[j * n + i] {
                    return Err(ClusteringError::Matrix(format!("bad or asymmetric entry ({i},{j})")));
                }
            }
        }
        Ok(Dissimilarity { n, d })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self, ClusteringError> {
        let d = (0..n * n).map(|idx| {
            let (i, j) = (idx / n, idx % n);
            if i == j {
                0.0
            } else {
                f(i.min(j), i.max(j))
            }
        });
        Self::new(n, d.collect())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

/// `d[i][j] = 1 - scores[i][j]`.
pub fn to_dissimilarity(sim: &SimilarityMatrix) -> Dissimilarity {
    let d = sim.scores().iter().map(|s| 1.0 - s).collect();
    Dissimilarity { n: sim.len(), d }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    /// Ascending point indices; cluster `c` is represented by `medoid_indices[c]`.
    pub medoid_indices: Vec<usize>,
    pub assignment: Vec<usize>,
    pub total_cost: f64,
    pub mean_silhouette: f64,
}

impl Clustering {
    /// Assigns every point to its nearest medoid (ties to the lowest medoid
    /// index; medoids always to themselves) and scores the result.
    pub fn from_medoids(d: &Dissimilarity, medoids: &[usize]) -> Result<Self, ClusteringError> {
        let mut medoids = medoids.to_vec();
        medoids.sort_unstable();
        if medoids.is_empty() {
            return Err(ClusteringError::Medoids("need at least one medoid".into()));
        }
        if medoids.windows(2).any(|w| w[0] == w[1]) {
            return Err(ClusteringError::Medoids("duplicate medoid".into()));
        }
        if medoids.iter().any(|&m| m >= d.len()) {
            return Err(ClusteringError::Medoids("medoid index out of range".into()));
        }
        let (assignment, total_cost) = assign(d, &medoids);
        let mut c =
            Clustering { k: medoids.len(), medoid_indices: medoids, assignment, total_cost, mean_silhouette: 0.0 };
        c.mean_silhouette = silhouette(d, &c).mean();
        Ok(c)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    /// CSV with one row per point: `label,cluster_id,is_medoid,silhouette`.
    pub fn to_csv(&self, labels: &[SourceMeta], report: &SilhouetteReport) -> String {
        let mut out = String::from("label,cluster_id,is_medoid,silhouette\n");
        for (i, label) in labels.iter().enumerate() {
            let is_medoid = self.medoid_indices.binary_search(&i).is_ok();
            let _ = writeln!(out, "{label},{},{is_medoid},{}", self.assignment[i], report.per_point[i]);
        }
        out
    }
}

fn assign(d: &Dissimilarity, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut assignment = Vec::with_capacity(d.len());
    let mut cost = 0.0;
    for o in 0..d.len() {
        let (c, dist) = match medoids.iter().position(|&m| m == o) {
            Some(c) => (c, 0.0),
            None => {
                let mut best = (0, d.get(o, medoids[0]));
                for (c, &m) in medoids.iter().enumerate().skip(1) {
                    let v = d.get(o, m);
                    if v < best.1 {
                        best = (c, v);
                    }
                }
                best
            }
        };
        assignment.push(c);
        cost += dist;
    }
    (assignment, cost)
}

/// Tie-break ranks: identity for seed 0, a seeded permutation otherwise.
fn tie_ranks(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if seed != 0 {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut rank = vec![0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Nearest and second-nearest medoid slot and distance for one point.
#[derive(Debug, Clone, Copy)]
struct Nearest {
    slot: usize,
    dist: f64,
    second: f64,
}

fn nearest_table(d: &Dissimilarity, medoids: &[usize]) -> Vec<Nearest> {
    (0..d.len())
        .map(|o| {
            let mut near = Nearest { slot: usize::MAX, dist: f64::INFINITY, second: f64::INFINITY };
            for (s, &m) in medoids.iter().enumerate() {
                let v = if m == o { -1.0 } else { d.get(o, m) };
                if v < near.dist {
                    near.second = near.dist;
                    near = Nearest { slot: s, dist: v, second: near.second };
                } else if v < near.second {
                    near.second = v;
                }
            }
            if near.dist < 0.0 {
                near.dist = 0.0;
            }
            near
        })
        .collect()
}

/// PAM: greedy BUILD followed by best-improvement SWAP until no swap lowers
/// the total cost. The seed only decides between exactly tied candidates.
pub fn pam(d: &Dissimilarity, k: usize, seed: u64) -> Result<Clustering, ClusteringError> {
    let n = d.len();
    if k < 2 || k >= n {
        return Err(ClusteringError::KOutOfRange { k, n });
    }
    let rank = tie_ranks(n, seed);
    let mut medoids = build(d, k, &rank);
    let mut cost = assign(d, &medoids).1;

    loop {
        let table = nearest_table(d, &medoids);
        let is_medoid = {
            let mut v = vec![false; n];
            medoids.iter().for_each(|&m| v[m] = true);
            v
        };
        let tol = 1e-12 * (1.0 + cost);
        // (delta, rank of candidate, rank of removed medoid, slot, candidate)
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        let mut correction = vec![0.0; k];
        for j in (0..n).filter(|&j| !is_medoid[j]) {
            correction.iter_mut().for_each(|c| *c = 0.0);
            let mut shared = 0.0;
            for (o, near) in table.iter().enumerate() {
                let doj = d.get(o, j);
                let gain = (doj - near.dist).min(0.0);
                shared += gain;
                correction[near.slot] += doj.min(near.second) - near.dist - gain;
            }
            for (slot, &corr) in correction.iter().enumerate() {
                let delta = shared + corr;
                let key = (delta, rank[j], rank[medoids[slot]]);
                let better = match best {
                    None => true,
                    Some((bd, bj, bm, _, _)) => key.0 < bd || (key.0 == bd && (key.1, key.2) < (bj, bm)),
                };
                if better {
                    best = Some((delta, rank[j], rank[medoids[slot]], slot, j));
                }
            }
        }
        match best {
            Some((delta, _, _, slot, j)) if delta < -tol => {
                medoids[slot] = j;
                medoids.sort_unstable();
                let new_cost = assign(d, &medoids).1;
                debug_assert!(new_cost <= cost + tol);
                cost = new_cost;
            }
            _ => break,
        }
    }
    Clustering::from_medoids(d, &medoids)
}

fn build(d: &Dissimilarity, k: usize, rank: &[usize]) -> Vec<usize> {
    let n = d.len();
    let better = |v: f64, i: usize, best: Option<(f64, usize)>, maximize: bool| match best {
        None => true,
        Some((bv, bi)) => {
            let strict = if maximize { v > bv } else { v < bv };
            strict || (v == bv && rank[i] < rank[bi])
        }
    };
    let mut first: Option<(f64, usize)> = None;
    for j in 0..n {
        let total: f64 = (0..n).map(|o| d.get(o, j)).sum();
        if better(total, j, first, false) {
            first = Some((total, j));
        }
    }
    let mut medoids = vec![first.unwrap().1];
    let mut nearest: Vec<f64> = (0..n).map(|o| d.get(o, medoids[0])).collect();
    let mut chosen = vec![false; n];
    chosen[medoids[0]] = true;
    while medoids.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for j in (0..n).filter(|&j| !chosen[j]) {
            let gain: f64 = (0..n).map(|o| (nearest[o] - d.get(o, j)).max(0.0)).sum();
            if better(gain, j, best, true) {
                best = Some((gain, j));
            }
        }
        let j = best.unwrap().1;
        chosen[j] = true;
        medoids.push(j);
        for (o, near) in nearest.iter_mut().enumerate() {
            *near = near.min(d.get(o, j));
        }
    }
    medoids.sort_unstable();
    medoids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteReport {
    pub per_point: Vec<f64>,
    pub per_k_curve: BTreeMap<usize, f64>,
}

impl SilhouetteReport {
    pub fn mean(&self) -> f64 {
        if self.per_point.is_empty() {
            0.0
        } else {
            self.per_point.iter().sum::<f64>() / self.per_point.len() as f64
        }
    }

    /// `k,mean_silhouette` rows.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("k,mean_silhouette\n");
        for (k, s) in &self.per_k_curve {
            let _ = writeln!(out, "{k},{s}");
        }
        out
    }
}

/// Per-point silhouette: `a` is the mean dissimilarity to the rest of the
/// point's cluster, `b` the smallest mean dissimilarity to another cluster,
/// `s = (b - a) / max(a, b)`, and `s = 0` for singleton clusters.
pub fn silhouette(d: &Dissimilarity, clustering: &Clustering) -> SilhouetteReport {
    let n = d.len();
    let k = clustering.k;
    let sizes = clustering.cluster_sizes();
    let mut per_point = Vec::with_capacity(n);
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = clustering.assignment[i];
        if sizes[own] <= 1 {
            per_point.push(0.0);
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[clustering.assignment[j]] += d.get(i, j);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let s = if !b.is_finite() {
            0.0
        } else {
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        };
        per_point.push(s);
    }
    let mut report = SilhouetteReport { per_point, per_k_curve: BTreeMap::new() };
    let mean = report.mean();
    report.per_k_curve.insert(k, mean);
    report
}

/// Default k search range `[2, min(n - 1, 60)]`.
pub fn default_k_range(n: usize) -> (usize, usize) {
    (2, (n.saturating_sub(1)).min(DEFAULT_K_MAX))
}

/// Runs PAM for every k in `[k_min, k_max]` and keeps the k with the highest
/// mean silhouette (ties to the smallest k). The returned report holds the
/// per-point values for the best k and the full curve.
pub fn select_k(
    d: &Dissimilarity,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<(usize, Clustering, SilhouetteReport), ClusteringError> {
    let n = d.len();
    if k_min < 2 || k_min > k_max || k_max >= n {
        return Err(ClusteringError::BadRange { k_min, k_max, n });
    }
    let mut curve = BTreeMap::new();
    let mut best: Option<(Clustering, SilhouetteReport)> = None;
    for k in k_min..=k_max {
        let c = pam(d, k, seed)?;
        let report = silhouette(d, &c);
        let mean = report.mean();
        curve.insert(k, mean);
        if best.as_ref().is_none_or(|(_, r)| mean > r.mean()) {
            best = Some((c, report));
        }
    }
    let (c, mut report) = best.unwrap();
    report.per_k_curve = curve;
    Ok((c.k, c, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blobs() -> Dissimilarity {
        Dissimilarity::from_fn(6, |i, j| if (i < 3) == (j < 3) { 0.0 } else { 1.0 }).unwrap()
    }

    #[test]
    fn dissimilarity_of_scores() {
        let labels = vec![SourceMeta::default(); 2];
        let sim = SimilarityMatrix::from_scores(labels, vec![1.0, 0.67, 0.67, 1.0]).unwrap();
        let d = to_dissimilarity(&sim);
        assert_eq!(d.get(0, 0), 0.0);
        assert!((d.get(0, 1) - 0.33).abs() < 1e-12);
        assert_eq!(d.get(0, 1), d.get(1, 0));
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(Dissimilarity::new(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(Dissimilarity::new(2, vec![1.0, 1.0, 1.0, 0.0]).is_err());
        assert!(Dissimilarity::new(2, vec![0.0, -1.0, -1.0, 0.0]).is_err());
    }

    #[test]
    fn pam_separates_two_blobs() {
        let c = pam(&two_blobs(), 2, 0).unwrap();
        assert_eq!(c.total_cost, 0.0);
        assert_eq!(&c.assignment[..3], &[c.assignment[0]; 3]);
        assert_eq!(&c.assignment[3..], &[c.assignment[3]; 3]);
        assert_ne!(c.assignment[0], c.assignment[3]);
        assert_eq!(c.mean_silhouette, 1.0);
    }

    #[test]
    fn pam_k_range() {
        let d = two_blobs();
        assert!(matches!(pam(&d, 1, 0), Err(ClusteringError::KOutOfRange { .. })));
        assert!(matches!(pam(&d, 6, 0), Err(ClusteringError::KOutOfRange { .. })));
    }

    #[test]
    fn medoids_own_their_cluster_even_with_duplicates() {
        // points 0 and 1 coincide
        let d = Dissimilarity::from_fn(4, |i, j| if (i, j) == (0, 1) { 0.0 } else { 1.0 }).unwrap();
        let c = Clustering::from_medoids(&d, &[0, 1]).unwrap();
        assert_eq!(c.assignment[0], 0);
        assert_eq!(c.assignment[1], 1);
        // ties for other points go to the lowest medoid index
        assert_eq!(c.assignment[2], 0);
    }

    #[test]
    fn silhouette_well_separated_is_one() {
        let d = two_blobs();
        let c = Clustering::from_medoids(&d, &[0, 3]).unwrap();
        let r = silhouette(&d, &c);
        assert!(r.per_point.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn singleton_silhouette_is_zero() {
        let d = Dissimilarity::from_fn(4, |i, j| (i as f64 - j as f64).abs()).unwrap();
        let c = Clustering::from_medoids(&d, &[0, 2]).unwrap();
        // point 0 and point 1: 1 is equidistant to 0 and 2 -> goes to 0
        assert_eq!(c.assignment, vec![0, 0, 1, 1]);
        let c = Clustering::from_medoids(&d, &[0, 1, 2, 3]).unwrap();
        let r = silhouette(&d, &c);
        assert_eq!(r.per_point, vec![0.0; 4]);
        assert_eq!(r.mean(), 0.0);
    }

    #[test]
    fn select_k_two_blobs_and_degenerate_range() {
        let d = two_blobs();
        let (k, c, report) = select_k(&d, 2, 4, 0).unwrap();
        assert_eq!(k, 2);
        assert_eq!(c.k, 2);
        assert_eq!(report.per_k_curve.len(), 3);
        let (k, _, _) = select_k(&d, 2, 2, 0).unwrap();
        assert_eq!(k, 2);
        assert!(select_k(&d, 3, 2, 0).is_err());
        assert!(select_k(&d, 2, 6, 0).is_err());
    }

    #[test]
    fn seeded_ties_stay_optimal() {
        let d = two_blobs();
        for seed in 0..5 {
            let c = pam(&d, 2, seed).unwrap();
            assert_eq!(c.total_cost, 0.0);
            assert_eq!(pam(&d, 2, seed).unwrap(), c);
        }
    }
}
