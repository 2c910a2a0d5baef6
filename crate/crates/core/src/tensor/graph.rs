use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn, Zip};

use super::conv::{self, Conv2dConfig};
use super::norm;
use super::Real;

/// Recorded operation and the state its backward pass needs.
pub(crate) enum Op<F: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Shift(usize),
    MulScalarVar { t: usize, s: usize },
    AddScalarVar { t: usize, s: usize },
    AddBias { x: usize, b: usize },
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    SumSq(usize),
    Frobenius(usize),
    RowNorms(usize),
    RowSumSq(usize),
    PairwiseDist(usize, usize),
    Gather { src: usize, idx: Vec<usize> },
    CrossEntropy { logits: usize, probs: Array2<F>, labels: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Reshape(usize),
    Conv2d { x: usize, w: usize, cfg: Conv2dConfig, col: Array2<F>, in_shape: [usize; 4] },
    MaxPool { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: ArrayD<F>, inv_std: Vec<F>, batch_stats: bool },
    GlobalAvgPool(usize),
}

struct Node<F: Real> {
    value: Rc<ArrayD<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only computation tape.
pub struct Graph<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> fmt::Debug for Graph<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Real> {
    pub(crate) graph: &'g Graph<F>,
    pub(crate) id: usize,
}

impl<F: Real> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf. Gradients are reported for it.
    pub fn param(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    /// Constant leaf. No gradient flows into it.
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: F) -> Var<'_, F> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn leaf(&self, value: ArrayD<F>, requires_grad: bool) -> Var<'_, F> {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records `op` unless no parent needs gradients, in which case the
    /// result is stored as a constant and the saved state is dropped.
    pub(crate) fn push(&self, value: ArrayD<F>, op: Op<F>, parents: &[usize]) -> Var<'_, F> {
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        if rg {
            self.push_node(value, op, true)
        } else {
            self.push_node(value, Op::Leaf, false)
        }
    }

    fn push_node(&self, value: ArrayD<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Reverse-mode sweep from a single-element `root`.
    pub fn backward(&self, root: Var<'_, F>) -> Grads<F> {
        assert!(std::ptr::eq(root.graph, self), "root belongs to another graph");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(root.id + 1);
        grads.resize_with(root.id + 1, || None);
        let root_value = &nodes[root.id].value;
        assert_eq!(root_value.len(), 1, "backward needs a scalar root");
        if !nodes[root.id].requires_grad {
            return Grads { grads };
        }
        grads[root.id] = Some(ArrayD::from_elem(root_value.raw_dim(), F::one()));

        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of the root with respect to `var`, or `None` when `var` does
    /// not influence the root.
    pub fn get(&self, var: Var<'_, F>) -> Option<&ArrayD<F>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Grads::get`] but returns zeros shaped like `var` when absent.
    pub fn get_or_zeros(&self, var: Var<'_, F>) -> ArrayD<F> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(var.shape()),
        }
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<ArrayD<F>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

fn accumulate<F: Real>(nodes: &[Node<F>], grads: &mut [Option<ArrayD<F>>], id: usize, delta: ArrayD<F>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => *acc += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn scalar_of<F: Real>(a: &ArrayD<F>) -> F {
    *a.iter().next().expect("scalar value")
}

fn backprop<F: Real>(nodes: &[Node<F>], id: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
    let val = |i: usize| -> &ArrayD<F> { &nodes[i].value };
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.mapv(|v| -v));
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, g * val(*b));
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, g * val(*a));
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, grads, *a, g.mapv(|v| v * c));
        }
        Op::Shift(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::MulScalarVar { t, s } => {
            let sv = scalar_of(val(*s));
            if nodes[*t].requires_grad {
                accumulate(nodes, grads, *t, g.mapv(|v| v * sv));
            }
            if nodes[*s].requires_grad {
                let ds: F = Zip::from(g).and(val(*t)).fold(F::zero(), |acc, &gi, &ti| acc + gi * ti);
                accumulate(nodes, grads, *s, ArrayD::from_elem(val(*s).raw_dim(), ds));
            }
        }
        Op::AddScalarVar { t, s } => {
            accumulate(nodes, grads, *t, g.clone());
            if nodes[*s].requires_grad {
                let ds = g.sum();
                accumulate(nodes, grads, *s, ArrayD::from_elem(val(*s).raw_dim(), ds));
            }
        }
        Op::AddBias { x, b } => {
            accumulate(nodes, grads, *x, g.clone());
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, g.sum_axis(Axis(0)));
            }
        }
        Op::MatMul(a, b) => {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            let av = val(*a).view().into_dimensionality::<Ix2>().expect("2-d lhs");
            let bv = val(*b).view().into_dimensionality::<Ix2>().expect("2-d rhs");
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, g2.dot(&bv.t()).into_dyn());
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, av.t().dot(&g2).into_dyn());
            }
        }
        Op::Transpose(a) => {
            let gt = g.view().reversed_axes().as_standard_layout().into_owned();
            accumulate(nodes, grads, *a, gt);
        }
        Op::Relu(a) => {
            let mut d = g.clone();
            Zip::from(&mut d).and(out.as_ref()).for_each(|gi, &o| {
                if o <= F::zero() {
                    *gi = F::zero();
                }
            });
            accumulate(nodes, grads, *a, d);
        }
        Op::Sum(a) => {
            let gs = scalar_of(g);
            accumulate(nodes, grads, *a, ArrayD::from_elem(val(*a).raw_dim(), gs));
        }
        Op::Mean(a) => {
            let n = F::lit(val(*a).len().max(1) as f64);
            let gs = scalar_of(g) / n;
            accumulate(nodes, grads, *a, ArrayD::from_elem(val(*a).raw_dim(), gs));
        }
        Op::SumSq(a) => {
            let two = F::lit(2.0) * scalar_of(g);
            accumulate(nodes, grads, *a, val(*a).mapv(|v| v * two));
        }
        Op::Frobenius(a) => {
            // Subgradient 0 at the origin.
            let norm = scalar_of(out);
            let d = if norm > F::zero() {
                let k = scalar_of(g) / norm;
                val(*a).mapv(|v| v * k)
            } else {
                ArrayD::zeros(val(*a).raw_dim())
            };
            accumulate(nodes, grads, *a, d);
        }
        Op::RowNorms(a) => {
            let x = val(*a).view().into_dimensionality::<Ix2>().expect("2-d input");
            let mut d = Array2::<F>::zeros(x.raw_dim());
            for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                let norm = out[[i]];
                if norm > F::zero() {
                    let k = g[[i]] / norm;
                    row.zip_mut_with(&x.row(i), |di, &xi| *di = xi * k);
                }
            }
            accumulate(nodes, grads, *a, d.into_dyn());
        }
        Op::RowSumSq(a) => {
            let x = val(*a).view().into_dimensionality::<Ix2>().expect("2-d input");
            let mut d = x.to_owned();
            for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                let k = F::lit(2.0) * g[[i]];
                row.mapv_inplace(|v| v * k);
            }
            accumulate(nodes, grads, *a, d.into_dyn());
        }
        Op::PairwiseDist(a, b) => {
            let av = val(*a).view().into_dimensionality::<Ix2>().expect("2-d lhs");
            let bv = val(*b).view().into_dimensionality::<Ix2>().expect("2-d rhs");
            let dist = out.view().into_dimensionality::<Ix2>().expect("2-d dist");
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            let (n, d) = av.dim();
            let m = bv.nrows();
            let mut ga = Array2::<F>::zeros((n, d));
            let mut gb = Array2::<F>::zeros((m, d));
            for i in 0..n {
                for j in 0..m {
                    let dij = dist[[i, j]];
                    let gij = g2[[i, j]];
                    if dij <= F::zero() || gij == F::zero() {
                        continue;
                    }
                    let k = gij / dij;
                    for c in 0..d {
                        let diff = (av[[i, c]] - bv[[j, c]]) * k;
                        ga[[i, c]] += diff;
                        gb[[j, c]] -= diff;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga.into_dyn());
            accumulate(nodes, grads, *b, gb.into_dyn());
        }
        Op::Gather { src, idx } => {
            let mut d = ArrayD::<F>::zeros(val(*src).raw_dim());
            {
                let flat = d.as_slice_mut().expect("standard layout");
                for (k, &i) in idx.iter().enumerate() {
                    flat[i] += g[[k]];
                }
            }
            accumulate(nodes, grads, *src, d);
        }
        Op::CrossEntropy { logits, probs, labels } => {
            let mut d = probs.clone();
            for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                row[labels[i]] -= F::one();
                let gi = g[[i]];
                row.mapv_inplace(|v| v * gi);
            }
            accumulate(nodes, grads, *logits, d.into_dyn());
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                let piece = g.slice_axis(Axis(*axis), (start..start + len).into()).to_owned();
                accumulate(nodes, grads, p, piece);
                start += len;
            }
        }
        Op::Slice { src, axis, start } => {
            let mut d = ArrayD::<F>::zeros(val(*src).raw_dim());
            let len = g.shape()[*axis];
            d.slice_axis_mut(Axis(*axis), (*start..*start + len).into()).assign(g);
            accumulate(nodes, grads, *src, d);
        }
        Op::Reshape(a) => {
            let d = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(val(*a).raw_dim())
                .expect("reshape grad");
            accumulate(nodes, grads, *a, d);
        }
        Op::Conv2d { x, w, cfg, col, in_shape } => {
            let need_x = nodes[*x].requires_grad;
            let need_w = nodes[*w].requires_grad;
            let (dx, dw) = conv::conv2d_backward(g, col, val(*w), *in_shape, cfg, need_x, need_w);
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, dw);
            }
        }
        Op::MaxPool { x, argmax } => {
            let mut d = ArrayD::<F>::zeros(val(*x).raw_dim());
            {
                let flat = d.as_slice_mut().expect("standard layout");
                for (gi, &src) in g.iter().zip(argmax) {
                    flat[src] += *gi;
                }
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let gam = val(*gamma);
            let (dx, dgamma, dbeta) = norm::batch_norm_backward(g, xhat, gam, inv_std, *batch_stats);
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::GlobalAvgPool(a) => {
            let shape = val(*a).shape().to_vec();
            let hw = shape[2] * shape[3];
            let inv = F::one() / F::lit(hw as f64);
            let mut d = ArrayD::<F>::zeros(IxDyn(&shape));
            {
                let flat = d.as_slice_mut().expect("standard layout");
                for (k, gi) in g.iter().enumerate() {
                    let v = *gi * inv;
                    flat[k * hw..(k + 1) * hw].iter_mut().for_each(|e| *e = v);
                }
            }
            accumulate(nodes, grads, *a, d);
        }
    }
}
