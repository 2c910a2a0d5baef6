//! Shared helpers for the integration tests: random batches, straight
//! loop-based reference losses and a central-difference gradient checker.
#![allow(dead_code)]

pub mod criteria;

use std::path::Path;

use hwdnet::dataset::{DatasetIndex, SynthSpec, NUM_ORIENTATIONS};
use hwdnet::losses::{Reduction, TripletMining};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const DIM: usize = 6;
pub const CLASSES: usize = 4;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// 2 identities x 2 samples x 2 modalities with `d = 6` features and
/// random identity and orientation heads.
#[derive(Debug, Clone)]
pub struct SmallBatch {
    pub mu_rgb: ArrayD<f64>,
    pub mu_ir: ArrayD<f64>,
    pub up_rgb: ArrayD<f64>,
    pub up_ir: ArrayD<f64>,
    pub labels_rgb: Vec<usize>,
    pub labels_ir: Vec<usize>,
    pub orient_rgb: Vec<usize>,
    pub orient_ir: Vec<usize>,
    /// `[CLASSES, DIM]`.
    pub w_id: ArrayD<f64>,
    /// `[8, DIM]`.
    pub w_orient: ArrayD<f64>,
}

impl SmallBatch {
    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        let a = rng.random_range(0..CLASSES);
        let b = (a + rng.random_range(1..CLASSES)) % CLASSES;
        let labels = vec![a, a, b, b];
        let mut orient = || (0..4).map(|_| rng.random_range(0..NUM_ORIENTATIONS)).collect::<Vec<_>>();
        let (orient_rgb, orient_ir) = (orient(), orient());
        Self {
            mu_rgb: random(rng, &[4, DIM]),
            mu_ir: random(rng, &[4, DIM]),
            up_rgb: random(rng, &[4, DIM]),
            up_ir: random(rng, &[4, DIM]),
            labels_rgb: labels.clone(),
            labels_ir: labels,
            orient_rgb,
            orient_ir,
            w_id: random(rng, &[CLASSES, DIM]),
            w_orient: random(rng, &[NUM_ORIENTATIONS, DIM]),
        }
    }

    pub fn joint_labels(&self) -> Vec<usize> {
        self.labels_rgb.iter().chain(&self.labels_ir).copied().collect()
    }

    pub fn joint_orient(&self) -> Vec<usize> {
        self.orient_rgb.iter().chain(&self.orient_ir).copied().collect()
    }

    pub fn joint_mu(&self) -> ArrayD<f64> {
        ndarray::concatenate![ndarray::Axis(0), self.mu_rgb.view(), self.mu_ir.view()]
    }

    pub fn joint_upsilon(&self) -> ArrayD<f64> {
        ndarray::concatenate![ndarray::Axis(0), self.up_rgb.view(), self.up_ir.view()]
    }
}

pub fn row(x: &ArrayD<f64>, i: usize) -> Vec<f64> {
    x.index_axis(ndarray::Axis(0), i).iter().copied().collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn reduce(v: &[f64], reduction: Reduction) -> f64 {
    let s: f64 = v.iter().sum();
    match reduction {
        Reduction::Sum => s,
        Reduction::Mean => s / v.len() as f64,
    }
}

/// Reference losses written directly from their definitions.
pub mod oracle {
    use super::*;

    /// `−log softmax(W x_i)[y_i]` per row.
    pub fn cross_entropy(x: &ArrayD<f64>, w: &ArrayD<f64>, labels: &[usize], reduction: Reduction) -> f64 {
        let k = w.shape()[0];
        let per: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let xi = row(x, i);
                let logits: Vec<f64> = (0..k).map(|c| row(w, c).iter().zip(&xi).map(|(a, b)| a * b).sum()).collect();
                let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
                lse - logits[y]
            })
            .collect();
        reduce(&per, reduction)
    }

    /// Hinge per anchor over both directions. Returns the loss and the
    /// smallest distance from any hinge or mining decision to a kink.
    pub fn triplet(
        rgb: &ArrayD<f64>,
        ir: &ArrayD<f64>,
        lr: &[usize],
        li: &[usize],
        margin: f64,
        mining: TripletMining,
        reduction: Reduction,
    ) -> (f64, f64) {
        let mut per = Vec::new();
        let mut gap = f64::INFINITY;
        for (a, b, la, lb) in [(rgb, ir, lr, li), (ir, rgb, li, lr)] {
            for (i, &yi) in la.iter().enumerate() {
                let ai = row(a, i);
                let d: Vec<(f64, bool)> = lb.iter().enumerate().map(|(j, &yj)| (dist(&ai, &row(b, j)), yj == yi)).collect();
                let mut pos: Vec<f64> = d.iter().filter(|p| p.1).map(|p| p.0).collect();
                let mut neg: Vec<f64> = d.iter().filter(|p| !p.1).map(|p| p.0).collect();
                pos.sort_by(f64::total_cmp);
                neg.sort_by(f64::total_cmp);
                let (p, n) = match mining {
                    TripletMining::Paper => (pos[0], *neg.last().unwrap()),
                    TripletMining::Hard => (*pos.last().unwrap(), neg[0]),
                };
                for w in pos.windows(2).chain(neg.windows(2)) {
                    gap = gap.min(w[1] - w[0]);
                }
                let arg = margin + p - n;
                gap = gap.min(arg.abs());
                per.push(arg.max(0.0));
            }
        }
        (reduce(&per, reduction), gap)
    }

    fn centroids(x: &ArrayD<f64>, labels: &[usize]) -> Vec<(usize, Vec<f64>)> {
        let mut ids = labels.to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .map(|id| {
                let rows: Vec<Vec<f64>> = labels.iter().enumerate().filter(|(_, &l)| l == id).map(|(i, _)| row(x, i)).collect();
                let d = rows[0].len();
                let c = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect();
                (id, c)
            })
            .collect()
    }

    fn lookup(c: &[(usize, Vec<f64>)], id: usize) -> &[f64] {
        &c.iter().find(|(k, _)| *k == id).unwrap().1
    }

    fn pull(x: &ArrayD<f64>, labels: &[usize], target: impl Fn(usize) -> Vec<f64>) -> Vec<f64> {
        labels.iter().enumerate().map(|(i, &l)| dist(&row(x, i), &target(l)).powi(2)).collect()
    }

    /// Each sample to its own modality's identity mean.
    pub fn centroid_single(rgb: &ArrayD<f64>, ir: &ArrayD<f64>, lr: &[usize], li: &[usize], reduction: Reduction) -> f64 {
        let (cr, ci) = (centroids(rgb, lr), centroids(ir, li));
        let mut per = pull(rgb, lr, |l| lookup(&cr, l).to_vec());
        per.extend(pull(ir, li, |l| lookup(&ci, l).to_vec()));
        reduce(&per, reduction)
    }

    /// Each sample to the average of the two modality means.
    pub fn centroid_cross(rgb: &ArrayD<f64>, ir: &ArrayD<f64>, lr: &[usize], li: &[usize], reduction: Reduction) -> f64 {
        let (cr, ci) = (centroids(rgb, lr), centroids(ir, li));
        let both = |l: usize| lookup(&cr, l).iter().zip(lookup(&ci, l)).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<f64>>();
        let mut per = pull(rgb, lr, both);
        per.extend(pull(ir, li, both));
        reduce(&per, reduction)
    }

    /// `Σ_t ‖a_t W_rgb,t + b_t − W_ir,t‖_F`.
    pub fn weight_restrainer(terms: &[(f64, f64, &ArrayD<f64>, &ArrayD<f64>)]) -> f64 {
        terms
            .iter()
            .map(|(a, b, wr, wi)| wr.iter().zip(wi.iter()).map(|(r, i)| (a * r + b - i).powi(2)).sum::<f64>().sqrt())
            .sum()
    }
}

/// Central differences of `f` at `inputs`, one array per input.
pub fn finite_differences(inputs: &[ArrayD<f64>], h: f64, f: impl Fn(&[ArrayD<f64>]) -> f64) -> Vec<ArrayD<f64>> {
    inputs
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let mut out = ArrayD::zeros(x.raw_dim());
            for i in 0..x.len() {
                let mut xs = inputs.to_vec();
                xs[k].as_slice_mut().unwrap()[i] += h;
                let up = f(&xs);
                xs[k].as_slice_mut().unwrap()[i] -= 2.0 * h;
                let down = f(&xs);
                out.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
            }
            out
        })
        .collect()
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; 0 when both vanish.
pub fn relative_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    let norm = |x: &ArrayD<f64>| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        return 0.0;
    }
    norm(&(analytic - numeric)) / scale
}

/// Worst relative error over all inputs. `f` returns the value and the
/// analytic gradient of every input.
pub fn gradient_error(inputs: &[ArrayD<f64>], f: impl Fn(&[ArrayD<f64>]) -> (f64, Vec<ArrayD<f64>>)) -> f64 {
    let (_, analytic) = f(inputs);
    let numeric = finite_differences(inputs, 1e-5, |xs| f(xs).0);
    analytic.iter().zip(&numeric).map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max)
}

/// Generates a synthetic set with `test_ids` extra test identities.
pub fn synth(dir: &Path, num_ids: usize, spm: usize, test_ids: usize, seed: u64) -> DatasetIndex {
    let spec = SynthSpec { test_ids, ..SynthSpec::new(num_ids, spm, seed) };
    spec.generate(dir).expect("synthetic dataset")
}

/// The library's losses evaluated on plain arrays, with gradients of
/// every input.
pub mod library {
    use super::*;
    use hwdnet::backbone::{restrainer_transform, weight_distance};
    use hwdnet::losses::{centroid_loss, cross_modality_triplet, id_loss, orientation_loss, CentroidMode, Similarity};
    use hwdnet::nn::{Linear, Mode, ParamKind, ParamStore, Session};
    use hwdnet::tensor::{Graph, Var};

    pub type Eval = (f64, Vec<ArrayD<f64>>);

    fn head_loss(x: &[ArrayD<f64>], labels: &[usize], orientation: bool, reduction: Reduction) -> Eval {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("head.weight", ParamKind::Weight, x[1].clone());
        let head = Linear { weight: w, bias: None };
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Train);
        let feats = g.param(x[0].clone());
        let loss = if orientation {
            orientation_loss(&s, &head, feats, labels, reduction)
        } else {
            id_loss(&s, &head, feats, labels, reduction)
        }
        .expect("head loss");
        let grads = g.backward(loss);
        let gw = grads.get_or_zeros(s.bound(w).expect("head weight bound"));
        (loss.item(), vec![grads.get_or_zeros(feats), gw])
    }

    /// Inputs: joint `μ` `[8, d]`, head weight `[K, d]`.
    pub fn id(x: &[ArrayD<f64>], labels: &[usize], reduction: Reduction) -> Eval {
        head_loss(x, labels, false, reduction)
    }

    /// Inputs: joint `υ` `[8, d]`, head weight `[8, d]`.
    pub fn orient(x: &[ArrayD<f64>], orient: &[usize], reduction: Reduction) -> Eval {
        head_loss(x, orient, true, reduction)
    }

    fn leaves<'g>(g: &'g Graph<f64>, x: &[ArrayD<f64>]) -> Vec<Var<'g, f64>> {
        x.iter().map(|a| g.param(a.clone())).collect()
    }

    fn finish(g: &Graph<f64>, loss: Var<'_, f64>, vars: &[Var<'_, f64>]) -> Eval {
        let grads = g.backward(loss);
        (loss.item(), vars.iter().map(|v| grads.get_or_zeros(*v)).collect())
    }

    /// Inputs: `μ_rgb`, `μ_ir`.
    pub fn triplet(x: &[ArrayD<f64>], lr: &[usize], li: &[usize], margin: f64, mining: TripletMining, reduction: Reduction) -> Eval {
        let g = Graph::new();
        let v = leaves(&g, x);
        let loss = cross_modality_triplet(v[0], v[1], lr, li, margin, mining, reduction).expect("triplet");
        finish(&g, loss, &v)
    }

    /// Inputs: `μ_rgb`, `μ_ir`.
    pub fn centroid(x: &[ArrayD<f64>], lr: &[usize], li: &[usize], mode: CentroidMode, reduction: Reduction) -> Eval {
        let g = Graph::new();
        let v = leaves(&g, x);
        let loss = centroid_loss(v[0], lr, v[1], li, mode, Similarity::SquaredEuclidean, reduction).expect("centroid");
        finish(&g, loss, &v)
    }

    /// Inputs: groups of four (`a`, `b`, `W_rgb`, `W_ir`), summed.
    pub fn weight_restrainer(x: &[ArrayD<f64>]) -> Eval {
        let g = Graph::new();
        let v = leaves(&g, x);
        let mut total: Option<Var<'_, f64>> = None;
        for q in v.chunks(4) {
            let term = weight_distance(restrainer_transform(q[0], q[1], q[2]), q[3]).expect("same shapes");
            total = Some(match total {
                Some(t) => t.add(term),
                None => term,
            });
        }
        finish(&g, total.expect("at least one group"), &v)
    }
}
