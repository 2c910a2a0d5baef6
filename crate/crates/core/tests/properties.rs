//! Property tests for loss, metric, config and schedule invariants.

mod common;

use common::{library, oracle};
use hwdnet::dataset::{Orientation, NUM_ORIENTATIONS};
use hwdnet::losses::{CentroidMode, Reduction, TripletMining};
use hwdnet::metrics::{cmc_curve, mean_average_precision};
use hwdnet::trainer::{LrSchedule, Preset, TrainConfig};
use ndarray::{Array2, ArrayD, IxDyn};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = ArrayD<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| ArrayD::from_shape_vec(IxDyn(&[rows, cols]), v).unwrap())
}

fn permute_rows(x: &ArrayD<f64>, order: &[usize]) -> ArrayD<f64> {
    x.select(ndarray::Axis(0), order)
}

proptest! {
    #[test]
    fn restrainer_distance_is_nonnegative_and_zero_on_exact_fit(
        a in 0.1f64..2.0, b in -1.0f64..1.0, w in matrix(3, 3), other in matrix(3, 3)
    ) {
        let s = |x: f64| ArrayD::from_elem(IxDyn(&[]), x);
        let v = library::weight_restrainer(&[s(a), s(b), w.clone(), other]).0;
        prop_assert!(v >= 0.0);
        let fit = w.mapv(|x| a * x + b);
        let zero = library::weight_restrainer(&[s(a), s(b), w, fit]).0;
        prop_assert!(zero.abs() < 1e-12);
    }

    #[test]
    fn triplet_is_nonnegative_and_order_free(
        rgb in matrix(4, 3), ir in matrix(4, 3), margin in 0.0f64..2.0, hard in any::<bool>(),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()
    ) {
        let labels = [0usize, 0, 1, 1];
        let mining = if hard { TripletMining::Hard } else { TripletMining::Paper };
        let base = library::triplet(&[rgb.clone(), ir.clone()], &labels, &labels, margin, mining, Reduction::Sum).0;
        prop_assert!(base >= 0.0);
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let shuffled = library::triplet(&[permute_rows(&rgb, &perm), ir], &plabels, &labels, margin, mining, Reduction::Sum).0;
        prop_assert!((base - shuffled).abs() < 1e-9);
    }

    #[test]
    fn centroid_losses_ignore_sample_order_and_modality_swap(
        rgb in matrix(4, 3), ir in matrix(4, 3), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()
    ) {
        let labels = [0usize, 0, 1, 1];
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        for mode in [CentroidMode::SingleModality, CentroidMode::CrossModality] {
            let base = library::centroid(&[rgb.clone(), ir.clone()], &labels, &labels, mode, Reduction::Sum).0;
            let shuffled = library::centroid(&[permute_rows(&rgb, &perm), ir.clone()], &plabels, &labels, mode, Reduction::Sum).0;
            let swapped = library::centroid(&[ir.clone(), rgb.clone()], &labels, &labels, mode, Reduction::Sum).0;
            prop_assert!(base >= 0.0);
            prop_assert!((base - shuffled).abs() < 1e-9);
            prop_assert!((base - swapped).abs() < 1e-9);
        }
        // Pulling to the shared centroid never costs less than to the own one.
        let single = oracle::centroid_single(&rgb, &ir, &labels, &labels, Reduction::Sum);
        let cross = oracle::centroid_cross(&rgb, &ir, &labels, &labels, Reduction::Sum);
        prop_assert!(cross >= single - 1e-12);
    }

    #[test]
    fn cmc_is_monotone_and_bounded(
        dists in prop::collection::vec(0.0f64..1.0, 12), ids in prop::collection::vec(0usize..3, 6), pick in 0usize..6
    ) {
        let dist = Array2::from_shape_vec((2, 6), dists).unwrap();
        let q = vec![ids[pick], ids[(pick + 1) % 6]];
        let cmc = cmc_curve(&dist, &q, &ids, 6).unwrap();
        prop_assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((cmc[5] - 1.0).abs() < 1e-12);
        let map = mean_average_precision(&dist, &q, &ids).unwrap();
        prop_assert!(map > 0.0 && map <= 1.0);
        // Every precision in an average is at least 1/6 with six gallery items.
        prop_assert!(map >= 1.0 / 6.0 - 1e-12);
    }

    #[test]
    fn metrics_ignore_monotone_rescaling(
        dists in prop::collection::vec(0.0f64..1.0, 12), ids in prop::collection::vec(0usize..3, 6), scale in 0.1f64..10.0
    ) {
        let dist = Array2::from_shape_vec((2, 6), dists).unwrap();
        let q = vec![ids[0], ids[3]];
        let scaled = dist.mapv(|d| scale * d + 1.0);
        prop_assert_eq!(cmc_curve(&dist, &q, &ids, 6).unwrap(), cmc_curve(&scaled, &q, &ids, 6).unwrap());
        let (a, b) = (mean_average_precision(&dist, &q, &ids).unwrap(), mean_average_precision(&scaled, &q, &ids).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn step_schedule_never_increases(
        base in 1e-4f64..1.0, gamma in 0.01f64..1.0, milestones in prop::collection::vec(1usize..100, 0..4)
    ) {
        let s = LrSchedule::Step { milestones, gamma };
        let rates: Vec<f64> = (1..=120).map(|e| s.rate(base, e)).collect();
        prop_assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(rates[0], base);
    }

    #[test]
    fn config_text_round_trips(
        epochs in 1usize..500, lr in 1e-5f64..1.0, seed in any::<u64>(), erase in 0.0f64..1.0,
        milestones in prop::collection::vec(1usize..100, 0..4), plan in 0usize..=5
    ) {
        let mut cfg = TrainConfig::preset(Preset::Desk);
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.seed = seed;
        cfg.augment.erase_prob = erase;
        cfg.lr_schedule = LrSchedule::Step { milestones, gamma: 0.1 };
        cfg.set("plan.stage", &format!("s{plan}")).unwrap();
        prop_assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn mirroring_is_an_involution(class in 0u8..NUM_ORIENTATIONS as u8) {
        let o = Orientation::new(class).unwrap();
        prop_assert_eq!(o.mirrored().mirrored(), o);
    }
}
