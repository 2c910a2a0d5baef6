//! Analytic gradients against central finite differences.

mod common;

use common::criteria::{gradient_errors, GRAD_TOL};
use common::finite_differences;
use hwdnet::model::{HwdNet, ModelConfig};
use hwdnet::nn::{Mode, ParamStore, Session};
use hwdnet::tensor::Graph;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_loss_gradient_matches_finite_differences() {
    let (errs, _) = gradient_errors(40, 4);
    for (name, err) in errs {
        assert!(err < GRAD_TOL, "{name}: rel err {err:e}");
    }
}

#[test]
fn restrainer_scalars_of_a_real_encoder_get_correct_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let model = HwdNet::new(&mut store, ModelConfig::new(3), &mut rng).unwrap();
    let scalars: Vec<_> = model.encoder.restrainer.scalar_ids().collect();
    assert!(!scalars.is_empty());
    for &id in &scalars {
        *store.get_mut(id) = ArrayD::from_elem(IxDyn(&[]), rng.random_range(0.5..1.5));
    }
    let loss_at = |values: &[ArrayD<f64>]| {
        let mut st = store.clone();
        for (&id, v) in scalars.iter().zip(values) {
            *st.get_mut(id) = v.clone();
        }
        let g = Graph::new();
        model.encoder.restrainer.loss(&Session::new(&g, &st, Mode::Train)).item()
    };
    let g = Graph::new();
    let s = Session::new(&g, &store, Mode::Train);
    let grads = g.backward(model.encoder.restrainer.loss(&s));
    let analytic: Vec<f64> = scalars.iter().map(|&id| grads.get(s.bound(id).unwrap()).unwrap()[[]]).collect();
    let inputs: Vec<ArrayD<f64>> = scalars.iter().map(|&id| store.get(id).clone()).collect();
    let numeric = finite_differences(&inputs, 1e-5, loss_at);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let n = n[[]];
        assert!((a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-8), "scalar {k}: {a} vs {n}");
    }
}
