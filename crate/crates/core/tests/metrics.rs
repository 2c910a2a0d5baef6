//! Retrieval metrics against brute-force enumeration.

mod common;

use common::criteria::{brute_force_metrics, metric_oracle, random_metric_case, METRIC_TOL};
use hwdnet::metrics::{cmc_curve, mean_average_precision};
use ndarray::array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_equal_brute_force_on_small_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let (dist, q, g, max_rank) = random_metric_case(&mut rng);
        let (cmc_ref, map_ref) = brute_force_metrics(&dist, &q, &g, max_rank);
        let cmc = cmc_curve(&dist, &q, &g, max_rank).unwrap();
        assert_eq!(cmc.len(), max_rank);
        for (a, b) in cmc.iter().zip(&cmc_ref) {
            assert!((a - b).abs() < METRIC_TOL, "{dist:?} {q:?} {g:?}: {cmc:?} vs {cmc_ref:?}");
        }
        let map = mean_average_precision(&dist, &q, &g).unwrap();
        assert!((map - map_ref).abs() < METRIC_TOL);
    }
}

#[test]
fn oracle_outcome_passes() {
    let o = metric_oracle();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn average_precision_hand_example() {
    let d = array![[0.1, 0.2, 0.3, 0.4]];
    let ap = mean_average_precision(&d, &[1], &[1, 0, 1, 0]).unwrap();
    assert_eq!(format!("{ap:.6}"), "0.833333");
}

#[test]
fn ties_rank_by_gallery_index() {
    let d = array![[0.5, 0.5, 0.5]];
    assert_eq!(cmc_curve(&d, &[2], &[1, 2, 2], 3).unwrap(), vec![0.0, 1.0, 1.0]);
    assert_eq!(cmc_curve(&d, &[1], &[1, 2, 2], 1).unwrap(), vec![1.0]);
}

#[test]
fn a_query_without_a_match_is_rejected() {
    let d = array![[0.1, 0.2]];
    assert!(cmc_curve(&d, &[9], &[1, 2], 2).unwrap_err().is_validation());
}
