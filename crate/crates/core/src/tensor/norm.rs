use ndarray::{ArrayD, IxDyn};

use super::Real;

/// Per-channel statistics of one training-mode batch normalization call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance.
    pub var: Vec<F>,
    /// Elements reduced per channel.
    pub count: usize,
}

fn layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "batch norm needs [N, C, ...], got {shape:?}");
    let spatial: usize = shape[2..].iter().product();
    (shape[0], shape[1], spatial)
}

fn channel_vec<F: Real>(a: &ArrayD<F>, c: usize, what: &str) -> Vec<F> {
    assert_eq!(a.len(), c, "batch norm {what}: expected {c} channels");
    a.iter().copied().collect()
}

pub(crate) fn batch_norm_train<F: Real>(
    x: &ArrayD<F>,
    gamma: &ArrayD<F>,
    beta: &ArrayD<F>,
    eps: F,
) -> (ArrayD<F>, ArrayD<F>, Vec<F>, BatchStats<F>) {
    let (n, c, s) = layout(x.shape());
    let m = n * s;
    assert!(m > 1, "batch norm in training mode needs more than one value per channel");
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mf = F::lit(m as f64);

    let mut mean = vec![F::zero(); c];
    for ni in 0..n {
        for (ci, mu) in mean.iter_mut().enumerate() {
            let base = (ni * c + ci) * s;
            *mu += xs[base..base + s].iter().copied().sum::<F>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= mf);
    let mut var = vec![F::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            let mu = mean[ci];
            var[ci] += xs[base..base + s].iter().fold(F::zero(), |a, &v| a + (v - mu) * (v - mu));
        }
    }
    var.iter_mut().for_each(|v| *v /= mf);
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();

    let (out, xhat) = normalize(xs, x.shape(), (n, c, s), &mean, &inv_std, gamma, beta);
    (out, xhat, inv_std, BatchStats { mean, var, count: m })
}

pub(crate) fn batch_norm_eval<F: Real>(
    x: &ArrayD<F>,
    gamma: &ArrayD<F>,
    beta: &ArrayD<F>,
    running_mean: &ArrayD<F>,
    running_var: &ArrayD<F>,
    eps: F,
) -> (ArrayD<F>, ArrayD<F>, Vec<F>) {
    let (n, c, s) = layout(x.shape());
    let mean = channel_vec(running_mean, c, "running mean");
    let inv_std: Vec<F> = channel_vec(running_var, c, "running var")
        .into_iter()
        .map(|v| F::one() / (v + eps).sqrt())
        .collect();
    let xs = x.as_standard_layout();
    let (out, xhat) = normalize(xs.as_slice().expect("standard layout"), x.shape(), (n, c, s), &mean, &inv_std, gamma, beta);
    (out, xhat, inv_std)
}

fn normalize<F: Real>(
    xs: &[F],
    shape: &[usize],
    (n, c, s): (usize, usize, usize),
    mean: &[F],
    inv_std: &[F],
    gamma: &ArrayD<F>,
    beta: &ArrayD<F>,
) -> (ArrayD<F>, ArrayD<F>) {
    let gam = channel_vec(gamma, c, "gamma");
    let bet = channel_vec(beta, c, "beta");
    let mut xhat = vec![F::zero(); xs.len()];
    let mut out = vec![F::zero(); xs.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gam[ci], bet[ci]);
            for k in base..base + s {
                let h = (xs[k] - mu) * is;
                xhat[k] = h;
                out[k] = g * h + b;
            }
        }
    }
    let dim = IxDyn(shape);
    (
        ArrayD::from_shape_vec(dim.clone(), out).expect("bn output"),
        ArrayD::from_shape_vec(dim, xhat).expect("bn xhat"),
    )
}

pub(crate) fn batch_norm_backward<F: Real>(
    g: &ArrayD<F>,
    xhat: &ArrayD<F>,
    gamma: &ArrayD<F>,
    inv_std: &[F],
    batch_stats: bool,
) -> (ArrayD<F>, ArrayD<F>, ArrayD<F>) {
    let (n, c, s) = layout(g.shape());
    let gs = g.as_standard_layout();
    let gs = gs.as_slice().expect("standard layout");
    let hs = xhat.as_slice().expect("standard layout");
    let gam = channel_vec(gamma, c, "gamma");

    let mut dbeta = vec![F::zero(); c];
    let mut dgamma = vec![F::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            for k in base..base + s {
                dbeta[ci] += gs[k];
                dgamma[ci] += gs[k] * hs[k];
            }
        }
    }
    let mut dx = vec![F::zero(); gs.len()];
    let mf = F::lit((n * s) as f64);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            let k_scale = gam[ci] * inv_std[ci];
            if batch_stats {
                let (db, dg) = (dbeta[ci] / mf, dgamma[ci] / mf);
                for k in base..base + s {
                    dx[k] = k_scale * (gs[k] - db - hs[k] * dg);
                }
            } else {
                for k in base..base + s {
                    dx[k] = k_scale * gs[k];
                }
            }
        }
    }
    let chan = IxDyn(&[c]);
    (
        ArrayD::from_shape_vec(IxDyn(g.shape()), dx).expect("bn dx"),
        ArrayD::from_shape_vec(chan.clone(), dgamma).expect("bn dgamma"),
        ArrayD::from_shape_vec(chan, dbeta).expect("bn dbeta"),
    )
}
