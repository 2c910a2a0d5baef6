//! Parameter storage and the small set of layers the model is built from.

use std::cell::RefCell;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::tensor::{BatchStats, Conv2dConfig, Graph, Real, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Weight,
    /// Trainable, never decayed (restrainer scalars).
    NoDecay,
    /// Non-trainable state such as running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<F>,
}

/// Flat registry of every tensor a model owns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind != ParamKind::Buffer).map(|e| e.value.len()).sum()
    }

    /// Folds batch statistics into running averages (PyTorch convention:
    /// `running = (1 - m) * running + m * batch`, unbiased variance).
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<F>>, momentum: F) {
        let keep = F::one() - momentum;
        for up in updates {
            let n = up.stats.count;
            let unbias = if n > 1 { F::lit(n as f64 / (n - 1) as f64) } else { F::one() };
            for (r, &m) in self.get_mut(up.mean).iter_mut().zip(&up.stats.mean) {
                *r = keep * *r + momentum * m;
            }
            for (r, &v) in self.get_mut(up.var).iter_mut().zip(&up.stats.var) {
                *r = keep * *r + momentum * v * unbias;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update produced by a training forward pass.
#[derive(Debug, Clone)]
pub struct StatUpdate<F> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<F>,
}

/// Binds a [`ParamStore`] to a [`Graph`] for one forward pass.
///
/// Each parameter enters the graph at most once, so a tensor used by both
/// streams accumulates gradient from both.
pub struct Session<'g, 's, F: Real> {
    pub graph: &'g Graph<F>,
    store: &'s ParamStore<F>,
    mode: Mode,
    vars: RefCell<Vec<Option<Var<'g, F>>>>,
    updates: RefCell<Vec<StatUpdate<F>>>,
}

impl<'g, 's, F: Real> Session<'g, 's, F> {
    pub fn new(graph: &'g Graph<F>, store: &'s ParamStore<F>, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            vars: RefCell::new(vec![None; store.len()]),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    /// Graph variable for a parameter. Trainable in train mode, constant otherwise.
    pub fn param(&self, id: ParamId) -> Var<'g, F> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let trainable = self.mode == Mode::Train && self.store.kind(id) != ParamKind::Buffer;
        let v = self.graph.leaf(self.store.get(id).clone(), trainable);
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Graph variable already created for `id`, if any.
    pub fn bound(&self, id: ParamId) -> Option<Var<'g, F>> {
        self.vars.borrow()[id.0]
    }

    pub(crate) fn record(&self, update: StatUpdate<F>) {
        self.updates.borrow_mut().push(update);
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate<F>> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

fn normal<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::lit(dist.sample(rng)))
}

fn uniform<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> ArrayD<F> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::lit(dist.sample(rng)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub cfg: Conv2dConfig,
}

impl Conv2d {
    /// Kaiming-normal fan-in initialization.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        (c_in, c_out, k): (usize, usize, usize),
        cfg: Conv2dConfig,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, normal(rng, &[c_out, c_in, k, k], std));
        Self { weight, cfg }
    }

    pub fn forward<'g, F: Real>(&self, s: &Session<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        x.conv2d(s.param(self.weight), self.cfg)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let ones = || ArrayD::from_elem(IxDyn(&[channels]), F::one());
        let zeros = || ArrayD::zeros(IxDyn(&[channels]));
        Self {
            gamma: store.add(format!("{name}.weight"), ParamKind::Weight, ones()),
            beta: store.add(format!("{name}.bias"), ParamKind::Weight, zeros()),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, zeros()),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, ones()),
        }
    }

    pub fn forward<'g, F: Real>(&self, s: &Session<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        let (gamma, beta) = (s.param(self.gamma), s.param(self.beta));
        let eps = F::lit(BN_EPS);
        match s.mode() {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta, eps);
                s.record(StatUpdate { mean: self.running_mean, var: self.running_var, stats });
                y
            }
            Mode::Eval => {
                let store = s.store();
                x.batch_norm_eval(gamma, beta, store.get(self.running_mean), store.get(self.running_var), eps)
            }
        }
    }

    /// Learnable tensors only; running statistics are buffers.
    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    pub fn buffers(&self) -> Vec<ParamId> {
        vec![self.running_mean, self.running_var]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

pub enum LinearInit {
    /// Kaiming-uniform fan-in bound `sqrt(1 / fan_in)`, as PyTorch.
    FanIn,
    /// Small normal weights, the usual choice for re-ID classifier heads.
    Normal(f64),
    Zeros,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        (d_in, d_out): (usize, usize),
        bias: bool,
        init: LinearInit,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        let w = match init {
            LinearInit::FanIn => uniform(rng, &[d_out, d_in], bound),
            LinearInit::Normal(std) => normal(rng, &[d_out, d_in], std),
            LinearInit::Zeros => ArrayD::zeros(IxDyn(&[d_out, d_in])),
        };
        let b = match init {
            LinearInit::FanIn => uniform(rng, &[d_out], bound),
            _ => ArrayD::zeros(IxDyn(&[d_out])),
        };
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Weight, b));
        Self { weight, bias }
    }

    pub fn forward<'g, F: Real>(&self, s: &Session<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        x.linear(s.param(self.weight), self.bias.map(|b| s.param(b)))
    }

    pub fn in_features<F: Real>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.weight).shape()[1]
    }

    pub fn out_features<F: Real>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shared_parameter_enters_graph_once() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamKind::Weight, ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Train);
        let a = s.param(id);
        let b = s.param(id);
        assert_eq!(a.id(), b.id());
        let loss = a.sum().add(b.sum());
        let grads = g.backward(loss);
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn eval_session_binds_constants() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamKind::Weight, ArrayD::zeros(IxDyn(&[2])));
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Eval);
        assert!(!s.param(id).requires_grad());
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let update = StatUpdate {
            mean: bn.running_mean,
            var: bn.running_var,
            stats: BatchStats { mean: vec![2.0], var: vec![3.0], count: 4 },
        };
        store.apply_stat_updates(vec![update], 0.1);
        assert!((store.get(bn.running_mean)[[0]] - 0.2).abs() < 1e-12);
        assert!((store.get(bn.running_var)[[0]] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_linear_outputs_bias_only() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "fc", (3, 2), true, LinearInit::Zeros, &mut rng);
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Eval);
        let y = lin.forward(&s, g.constant(ArrayD::from_elem(IxDyn(&[4, 3]), 5.0)));
        assert!(y.value().iter().all(|&v| v == 0.0));
    }
}
