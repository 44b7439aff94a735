//! Randomized invariants.

mod common;

use proptest::prelude::*;
use striation::clustering::{pam, silhouette, Clustering, Dissimilarity};
use striation::densities::{collect_scores, fit_beta, AggregationMode, BetaFit};
use striation::evaluation::{auc, roc_area, roc_curve, Confusion};
use striation::extraction::{extract_signature, smooth_local_regression};
use striation::likelihood::verbal_scale;
use striation::meta::{Side, SourceMeta};
use striation::similarity::{align, similarity_score, SimilarityMatrix};
use striation::Profile;

use common::*;

fn signal(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    (min..max, any::<u64>()).prop_map(|(n, seed)| smooth(n, &mut rng(seed)))
}

fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..max)
}

fn dissimilarity(n: usize, seed: u64) -> Dissimilarity {
    random_dissimilarity(n, &mut rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_is_symmetric(a in signal(60, 400), b in signal(60, 400)) {
        let (sa, sb) = (sig(a), sig(b));
        let ab = similarity_score(&sa, &sb).unwrap();
        let ba = similarity_score(&sb, &sa).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn similarity_ignores_affine_rescaling(
        a in signal(60, 300),
        b in signal(60, 300),
        scale in 0.01f64..100.0,
        shift in -50.0f64..50.0,
    ) {
        let base = similarity_score(&sig(a.clone()), &sig(b.clone())).unwrap();
        let moved = similarity_score(&sig(a.iter().map(|v| v * scale + shift).collect()), &sig(b)).unwrap();
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn alignment_agrees_with_brute_force(a in signal(40, 160), b in signal(40, 160)) {
        let got = align(&sig(a.clone()), &sig(b.clone()), 0.9).unwrap();
        let (lag, r) = brute_force_align(&a, &b, 0.9).unwrap();
        prop_assert!((got.ccf_raw - r).abs() < 1e-10);
        prop_assert_eq!(got.lag, lag);
    }

    #[test]
    fn roc_is_monotone_and_anchored(km in scores(40), knm in scores(40)) {
        let roc = roc_curve(&km, &knm);
        let first = roc.first().unwrap();
        let last = roc.last().unwrap();
        prop_assert_eq!((first.threshold, first.fpr, first.tpr), (1.0, 0.0, 0.0));
        prop_assert_eq!(last.threshold, 0.0);
        if km.iter().chain(&knm).all(|&s| s > 0.0) {
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        }
        for w in roc.windows(2) {
            prop_assert!(w[0].threshold > w[1].threshold);
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        prop_assert!((auc(&roc) - roc_area(&km, &knm)).abs() < 1e-9);
    }

    #[test]
    fn roc_area_depends_only_on_ranks(km in scores(30), knm in scores(30), power in 0.2f64..5.0) {
        let bend = |v: &[f64]| v.iter().map(|x| x.powf(power)).collect::<Vec<_>>();
        let before = roc_area(&km, &knm);
        let after = roc_area(&bend(&km), &bend(&knm));
        prop_assert!((before - after).abs() < 1e-12);
        let flipped = roc_area(&knm, &km);
        prop_assert!((before + flipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_partitions_both_classes(km in scores(50), knm in scores(50), t in 0.0f64..1.0) {
        let c = Confusion::from_scores(&km, &knm, t);
        prop_assert_eq!(c.tp + c.fn_, km.len());
        prop_assert_eq!(c.tn + c.fp, knm.len());
        prop_assert_eq!(c.tp, km.iter().filter(|&&s| s > t).count());
    }

    #[test]
    fn beta_moments_round_trip(alpha in 0.5f64..200.0, beta in 0.5f64..200.0) {
        let fit = BetaFit::from_params(alpha, beta).unwrap();
        let back = BetaFit::from_moments(fit.mean(), fit.variance()).unwrap();
        prop_assert!(((back.alpha - alpha) / alpha).abs() < 1e-8);
        prop_assert!(((back.beta - beta) / beta).abs() < 1e-8);
    }

    #[test]
    fn fitted_beta_reproduces_sample_mean(sample in prop::collection::vec(0.05f64..0.95, 3..80)) {
        let n = sample.len() as f64;
        let mean = sample.iter().sum::<f64>() / n;
        let var = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assume!(var > 1e-6);
        let fit = fit_beta(&sample).unwrap();
        prop_assert!((fit.mean() - mean).abs() < 1e-10);
        prop_assert!((fit.variance() - var).abs() < 1e-10);
    }

    #[test]
    fn smoothing_commutes_with_offsets(s in signal(30, 300), c in -1e3f64..1e3, span in 0.05f64..1.0) {
        // narrower windows are legitimately singular for a quadratic fit
        prop_assume!(span * s.len() as f64 >= 10.0);
        let base = smooth_local_regression(&profile(s.clone()), span).unwrap();
        let moved = smooth_local_regression(&profile(s.iter().map(|v| v + c).collect()), span).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a + c - b).abs() < 1e-7 * (1.0 + c.abs()));
        }
        let r1 = extract_signature(&profile(s.clone()), span).unwrap();
        let r2 = extract_signature(&profile(s.iter().map(|v| v + c).collect()), span).unwrap();
        for (a, b) in r1.values().iter().zip(r2.values()) {
            prop_assert!((a - b).abs() < 1e-7 * (1.0 + c.abs()));
        }
        prop_assert!(r1.values().iter().sum::<f64>().abs() < 1e-9 * s.len() as f64);
    }

    #[test]
    fn pam_returns_a_swap_local_optimum(n in 3usize..12, seed in any::<u64>(), k_frac in 0.0f64..1.0) {
        let d = dissimilarity(n, seed);
        let k = 2 + ((n - 3) as f64 * k_frac) as usize;
        let c = pam(&d, k, 0).unwrap();
        prop_assert_eq!(c.medoid_indices.len(), k);
        prop_assert!(c.total_cost >= exhaustive_pam_cost(&d, k) - 1e-12);
        // no single swap improves a returned solution
        for out in 0..k {
            for cand in (0..n).filter(|i| !c.medoid_indices.contains(i)) {
                let mut m = c.medoid_indices.clone();
                m[out] = cand;
                m.sort_unstable();
                let other = Clustering::from_medoids(&d, &m).unwrap();
                prop_assert!(other.total_cost >= c.total_cost - 1e-12);
            }
        }
        for (i, &a) in c.assignment.iter().enumerate() {
            let own = d.get(i, c.medoid_indices[a]);
            prop_assert!(c.medoid_indices.iter().all(|&m| own <= d.get(i, m)));
        }
    }

    #[test]
    fn silhouette_values_are_bounded(n in 3usize..15, seed in any::<u64>()) {
        let d = dissimilarity(n, seed);
        let c = pam(&d, 2, 0).unwrap();
        let report = silhouette(&d, &c);
        prop_assert_eq!(report.per_point.len(), n);
        prop_assert!(report.per_point.iter().all(|s| (-1.0..=1.0).contains(s)));
        prop_assert!((c.mean_silhouette - report.mean()).abs() < 1e-12);
    }

    #[test]
    fn score_collection_ignores_mark_order(perm_seed in any::<u64>()) {
        let labels: Vec<SourceMeta> = (1..=3)
            .flat_map(|t| (1..=3).map(move |r| SourceMeta::new(t, Side::A, r).unwrap()))
            .collect();
        let n = labels.len();
        let mut g = rng(9);
        let d = random_dissimilarity(n, &mut g);
        let scores: Vec<f64> = (0..n * n).map(|x| 1.0 - d.get(x / n, x % n)).collect();
        let m = SimilarityMatrix::from_scores(labels.clone(), scores).unwrap();

        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng(perm_seed));
        let permuted = m.subset(&order);
        for mode in [AggregationMode::Naive, AggregationMode::SourceAveraged] {
            let mut a = collect_scores(&m, mode).unwrap();
            let mut b = collect_scores(&permuted, mode).unwrap();
            for v in [&mut a.km_scores, &mut a.knm_scores, &mut b.km_scores, &mut b.knm_scores] {
                v.sort_by(f64::total_cmp);
            }
            prop_assert_eq!(a.km_scores.len(), b.km_scores.len());
            for (x, y) in a.km_scores.iter().zip(&b.km_scores).chain(a.knm_scores.iter().zip(&b.knm_scores)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn verbal_bands_mirror_around_one(log10_lr in -7.0f64..7.0) {
        let lr = 10f64.powf(log10_lr);
        let up = verbal_scale(lr).unwrap();
        let down = verbal_scale(1.0 / lr).unwrap();
        prop_assert_eq!(up.band, down.band);
    }
}

fn profile(values: Vec<f64>) -> Profile {
    Profile::new(values, 3.45, SourceMeta::default()).unwrap()
}

#[test]
fn silhouette_of_far_apart_pairs_is_one() {
    let d = Dissimilarity::from_fn(4, |i, j| if i / 2 == j / 2 { 0.0 } else { 1.0 }).unwrap();
    let c = pam(&d, 2, 0).unwrap();
    assert!(silhouette(&d, &c).per_point.iter().all(|&s| s == 1.0));
}
