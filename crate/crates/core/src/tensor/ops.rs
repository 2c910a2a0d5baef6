use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn, Zip};

use super::conv::{self, Conv2dConfig};
use super::graph::{Op, Var};
use super::norm::{self, BatchStats};
use super::Real;

fn as2<'a, F: Real>(a: &'a ArrayD<F>, what: &str) -> ndarray::ArrayView2<'a, F> {
    a.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("{what}: expected a 2-d tensor, got shape {:?}", a.shape()))
}

impl<'g, F: Real> Var<'g, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<ArrayD<F>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor of shape {:?}", v.shape());
        *v.iter().next().expect("one element")
    }

    fn same_graph(&self, other: &Var<'g, F>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
    }

    fn same_shape(&self, other: &Var<'g, F>, op: &str) -> (Rc<ArrayD<F>>, Rc<ArrayD<F>>) {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
        (a, b)
    }

    pub fn add(&self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = self.same_shape(&other, "add");
        let out = a.as_ref() + b.as_ref();
        self.graph.push(out, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(&self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = self.same_shape(&other, "sub");
        let out = a.as_ref() - b.as_ref();
        self.graph.push(out, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    pub fn mul(&self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = self.same_shape(&other, "mul");
        let out = a.as_ref() * b.as_ref();
        self.graph.push(out, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(&self, c: F) -> Var<'g, F> {
        let out = self.value().mapv(|v| v * c);
        self.graph.push(out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(&self, c: F) -> Var<'g, F> {
        let out = self.value().mapv(|v| v + c);
        self.graph.push(out, Op::Shift(self.id), &[self.id])
    }

    /// `self * s` for a single-element `s`, differentiable in both.
    pub fn mul_scalar_var(&self, s: Var<'g, F>) -> Var<'g, F> {
        self.same_graph(&s);
        let sv = s.item();
        let out = self.value().mapv(|v| v * sv);
        self.graph.push(out, Op::MulScalarVar { t: self.id, s: s.id }, &[self.id, s.id])
    }

    /// `self + s` for a single-element `s`, differentiable in both.
    pub fn add_scalar_var(&self, s: Var<'g, F>) -> Var<'g, F> {
        self.same_graph(&s);
        let sv = s.item();
        let out = self.value().mapv(|v| v + sv);
        self.graph.push(out, Op::AddScalarVar { t: self.id, s: s.id }, &[self.id, s.id])
    }

    /// Row-broadcast add of a `[m]` bias onto an `[n, m]` tensor.
    pub fn add_bias(&self, bias: Var<'g, F>) -> Var<'g, F> {
        self.same_graph(&bias);
        let x = self.value();
        let b = bias.value();
        let x2 = as2(&x, "add_bias");
        assert_eq!(b.shape(), &[x2.ncols()], "add_bias: bias width");
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        let mut out = x2.to_owned();
        out += &b1;
        let out = out.into_dyn();
        self.graph.push(out, Op::AddBias { x: self.id, b: bias.id }, &[self.id, bias.id])
    }

    pub fn matmul(&self, other: Var<'g, F>) -> Var<'g, F> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (a2, b2) = (as2(&a, "matmul lhs"), as2(&b, "matmul rhs"));
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dimension mismatch");
        let out = a2.dot(&b2).into_dyn();
        self.graph.push(out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// 2-d transpose materialized in standard layout.
    pub fn t(&self) -> Var<'g, F> {
        let a = self.value();
        let out = as2(&a, "transpose").t().as_standard_layout().into_owned().into_dyn();
        self.graph.push(out, Op::Transpose(self.id), &[self.id])
    }

    /// `x W^T (+ b)` with `W: [out, in]`.
    pub fn linear(&self, weight: Var<'g, F>, bias: Option<Var<'g, F>>) -> Var<'g, F> {
        let y = self.matmul(weight.t());
        match bias {
            Some(b) => y.add_bias(b),
            None => y,
        }
    }

    pub fn relu(&self) -> Var<'g, F> {
        let out = self.value().mapv(|v| if v > F::zero() { v } else { F::zero() });
        self.graph.push(out, Op::Relu(self.id), &[self.id])
    }

    pub fn sum(&self) -> Var<'g, F> {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        self.graph.push(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'g, F> {
        let v = self.value();
        let n = F::lit(v.len().max(1) as f64);
        let out = ArrayD::from_elem(IxDyn(&[]), v.sum() / n);
        self.graph.push(out, Op::Mean(self.id), &[self.id])
    }

    pub fn sum_sq(&self) -> Var<'g, F> {
        let s = self.value().iter().fold(F::zero(), |acc, &v| acc + v * v);
        self.graph.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumSq(self.id), &[self.id])
    }

    /// Frobenius norm over all elements; subgradient 0 at the origin.
    pub fn frobenius(&self) -> Var<'g, F> {
        let s = self.value().iter().fold(F::zero(), |acc, &v| acc + v * v);
        self.graph.push(ArrayD::from_elem(IxDyn(&[]), s.sqrt()), Op::Frobenius(self.id), &[self.id])
    }

    /// Euclidean norm of each row of a 2-d tensor.
    pub fn row_norms(&self) -> Var<'g, F> {
        let v = self.value();
        let x = as2(&v, "row_norms");
        let out: Array1<F> = x.rows().into_iter().map(|r| r.iter().fold(F::zero(), |a, &e| a + e * e).sqrt()).collect();
        self.graph.push(out.into_dyn(), Op::RowNorms(self.id), &[self.id])
    }

    /// Squared Euclidean norm of each row of a 2-d tensor.
    pub fn row_sum_sq(&self) -> Var<'g, F> {
        let v = self.value();
        let x = as2(&v, "row_sum_sq");
        let out: Array1<F> = x.rows().into_iter().map(|r| r.iter().fold(F::zero(), |a, &e| a + e * e)).collect();
        self.graph.push(out.into_dyn(), Op::RowSumSq(self.id), &[self.id])
    }

    /// Euclidean distances between rows: `[n, d] x [m, d] -> [n, m]`.
    pub fn pairwise_dist(&self, other: Var<'g, F>) -> Var<'g, F> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (a2, b2) = (as2(&a, "pairwise lhs"), as2(&b, "pairwise rhs"));
        assert_eq!(a2.ncols(), b2.ncols(), "pairwise_dist: feature width mismatch");
        let mut out = Array2::<F>::zeros((a2.nrows(), b2.nrows()));
        Zip::indexed(&mut out).for_each(|(i, j), o| {
            let s = Zip::from(a2.row(i)).and(b2.row(j)).fold(F::zero(), |acc, &x, &y| {
                let d = x - y;
                acc + d * d
            });
            *o = s.sqrt();
        });
        self.graph.push(out.into_dyn(), Op::PairwiseDist(self.id, other.id), &[self.id, other.id])
    }

    /// Picks elements by flat (row-major) index into a 1-d tensor.
    pub fn gather(&self, idx: Vec<usize>) -> Var<'g, F> {
        let v = self.value();
        let std = v.as_standard_layout();
        let flat = std.as_slice().expect("standard layout");
        let out: Array1<F> = idx.iter().map(|&i| flat[i]).collect();
        self.graph.push(out.into_dyn(), Op::Gather { src: self.id, idx }, &[self.id])
    }

    /// Per-row softmax cross entropy against integer labels, `[n, k] -> [n]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Var<'g, F> {
        let v = self.value();
        let x = as2(&v, "cross_entropy");
        assert_eq!(x.nrows(), labels.len(), "cross_entropy: one label per row");
        let mut probs = Array2::<F>::zeros(x.raw_dim());
        let mut loss = Array1::<F>::zeros(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mx = row.iter().fold(F::neg_infinity(), |m, &e| m.max(e));
            let mut z = F::zero();
            for (j, &e) in row.iter().enumerate() {
                let p = (e - mx).exp();
                probs[[i, j]] = p;
                z += p;
            }
            probs.row_mut(i).mapv_inplace(|p| p / z);
            loss[i] = z.ln() + mx - row[labels[i]];
        }
        let op = Op::CrossEntropy { logits: self.id, probs, labels: labels.to_vec() };
        self.graph.push(loss.into_dyn(), op, &[self.id])
    }

    pub fn concat(parts: &[Var<'g, F>], axis: usize) -> Var<'g, F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        graph.push(out, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Var<'g, F> {
        let v = self.value();
        assert!(start < end && end <= v.shape()[axis], "slice {start}..{end} out of range on axis {axis}");
        let out = v.slice_axis(Axis(axis), (start..end).into()).as_standard_layout().into_owned();
        self.graph.push(out, Op::Slice { src: self.id, axis, start }, &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g, F> {
        let v = self.value();
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.graph.push(out, Op::Reshape(self.id), &[self.id])
    }

    /// NCHW convolution without bias; `weight: [out, in, kh, kw]`.
    pub fn conv2d(&self, weight: Var<'g, F>, cfg: Conv2dConfig) -> Var<'g, F> {
        self.same_graph(&weight);
        let (x, w) = (self.value(), weight.value());
        let (out, col, in_shape) = conv::conv2d_forward(&x, &w, &cfg);
        let op = Op::Conv2d { x: self.id, w: weight.id, cfg, col, in_shape };
        self.graph.push(out, op, &[self.id, weight.id])
    }

    pub fn max_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Var<'g, F> {
        let (out, argmax) = conv::max_pool2d_forward(&self.value(), kernel, stride, padding);
        self.graph.push(out, Op::MaxPool { x: self.id, argmax }, &[self.id])
    }

    pub fn global_avg_pool(&self) -> Var<'g, F> {
        let out = conv::global_avg_pool(&self.value());
        self.graph.push(out, Op::GlobalAvgPool(self.id), &[self.id])
    }

    /// Batch normalization over channel axis 1 using the batch's own
    /// statistics. Returns the statistics so running averages can be updated.
    pub fn batch_norm_train(&self, gamma: Var<'g, F>, beta: Var<'g, F>, eps: F) -> (Var<'g, F>, BatchStats<F>) {
        let (out, xhat, inv_std, stats) = norm::batch_norm_train(&self.value(), &gamma.value(), &beta.value(), eps);
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, batch_stats: true };
        (self.graph.push(out, op, &[self.id, gamma.id, beta.id]), stats)
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: Var<'g, F>,
        beta: Var<'g, F>,
        running_mean: &ArrayD<F>,
        running_var: &ArrayD<F>,
        eps: F,
    ) -> Var<'g, F> {
        let (out, xhat, inv_std) =
            norm::batch_norm_eval(&self.value(), &gamma.value(), &beta.value(), running_mean, running_var, eps);
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, batch_stats: false };
        self.graph.push(out, op, &[self.id, gamma.id, beta.id])
    }
}
