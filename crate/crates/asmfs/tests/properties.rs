use approx::assert_abs_diff_eq;
use ndarray::Array2;
use proptest::prelude::*;

use asmfs::data_model::{zscore_apply_matrices, zscore_fit, MultiModalDataset};
use asmfs::evaluation::compute_metrics;
use asmfs::feature_selection::l21_norm;
use asmfs::similarity::{solve_row, DistanceRow};
use asmfs::synthetic::oracle_simplex_qp;

fn distance_row(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..50.0_f64, len..=len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn row_weights_form_a_sparse_distribution(
        distances in (3usize..12).prop_flat_map(distance_row),
        k_frac in 0.0..1.0_f64,
    ) {
        let p = distances.len();
        let k = 1 + ((p - 2) as f64 * k_frac) as usize; // 1..=p-1
        let row = DistanceRow {
            subject: 0,
            candidates: (1..=p).collect(),
            distances: distances.clone(),
        };
        let sol = solve_row(&row, k).unwrap();
        prop_assert_eq!(sol.weights.len(), p);
        let sum: f64 = sol.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "sum {}", sum);
        prop_assert!(sol.weights.iter().all(|w| *w >= 0.0));
        prop_assert!(sol.weights.iter().filter(|w| **w > 0.0).count() <= k);

        // smaller distance never gets a smaller weight
        for a in 0..p {
            for b in 0..p {
                if distances[a] < distances[b] {
                    prop_assert!(
                        sol.weights[a] >= sol.weights[b] - 1e-12,
                        "d {} < {} but w {} < {}",
                        distances[a], distances[b], sol.weights[a], sol.weights[b]
                    );
                }
            }
        }

        // the closed form solves the simplex-projection program
        if sol.gamma > 0.0 {
            let oracle = oracle_simplex_qp(&distances, sol.gamma).unwrap();
            for (w, o) in sol.weights.iter().zip(oracle.iter()) {
                prop_assert!((w - o).abs() < 1e-8, "{} vs {}", w, o);
            }
        }
    }

    #[test]
    fn zscore_is_idempotent(
        raw in prop::collection::vec(-100.0..100.0_f64, 24..=24),
        shift in -10.0..10.0_f64,
    ) {
        // 4 features x 6 subjects, one modality; labels balanced
        let x = Array2::from_shape_vec((4, 6), raw.iter().map(|v| v + shift).collect()).unwrap();
        let ds = MultiModalDataset::new(
            vec![x],
            vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0],
        ).unwrap();
        let stats = zscore_fit(&ds).unwrap();
        let once = zscore_apply_matrices(ds.modalities(), &stats).unwrap();
        let normalized = MultiModalDataset::new(once.clone(), ds.labels().to_vec()).unwrap();
        let stats2 = zscore_fit(&normalized).unwrap();
        let twice = zscore_apply_matrices(normalized.modalities(), &stats2).unwrap();
        for (a, b) in once[0].iter().zip(twice[0].iter()) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
        // fitted rows have mean 0 and unit (or degenerate) std
        for row in 0..4 {
            let mean: f64 = once[0].row(row).sum() / 6.0;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn l21_norm_is_a_norm(
        data in prop::collection::vec(-5.0..5.0_f64, 12..=12),
        other in prop::collection::vec(-5.0..5.0_f64, 12..=12),
        scale in -4.0..4.0_f64,
    ) {
        let a = Array2::from_shape_vec((4, 3), data).unwrap();
        let b = Array2::from_shape_vec((4, 3), other).unwrap();
        let na = l21_norm(&a.view());
        prop_assert!(na >= 0.0);
        // absolute homogeneity
        let scaled = a.mapv(|v| v * scale);
        prop_assert!((l21_norm(&scaled.view()) - scale.abs() * na).abs() < 1e-9 * (1.0 + na));
        // triangle inequality
        let sum = &a + &b;
        prop_assert!(
            l21_norm(&sum.view()) <= na + l21_norm(&b.view()) + 1e-9
        );
    }

    #[test]
    fn metric_identities_hold(
        outcomes in prop::collection::vec((prop::bool::ANY, prop::bool::ANY, -3.0..3.0_f64), 4..40),
    ) {
        let truth: Vec<f64> = outcomes.iter().map(|(t, _, _)| if *t { 1.0 } else { -1.0 }).collect();
        let pred: Vec<f64> = outcomes.iter().map(|(_, p, _)| if *p { 1.0 } else { -1.0 }).collect();
        let scores: Vec<f64> = outcomes.iter().map(|(_, _, s)| *s).collect();
        let m = compute_metrics(&truth, &pred, &scores).unwrap();
        let n = truth.len();
        prop_assert_eq!(
            m.true_positives + m.true_negatives + m.false_positives + m.false_negatives,
            n
        );
        assert_abs_diff_eq!(
            m.accuracy,
            (m.true_positives + m.true_negatives) as f64 / n as f64,
            epsilon = 1e-15
        );
        if let Some(auc) = m.auc {
            prop_assert!((0.0..=1.0).contains(&auc));
            // complement under score negation
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let mn = compute_metrics(&truth, &pred, &neg).unwrap();
            assert_abs_diff_eq!(auc + mn.auc.unwrap(), 1.0, epsilon = 1e-12);
        }
        if let (Some(sen), Some(spe)) = (m.sensitivity, m.specificity) {
            prop_assert!((0.0..=1.0).contains(&sen) && (0.0..=1.0).contains(&spe));
        }
    }
}
