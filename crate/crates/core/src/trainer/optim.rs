use ndarray::{ArrayD, Zip};

use crate::nn::{ParamId, ParamKind, ParamStore};
use crate::tensor::Real;

/// SGD with heavy-ball momentum and L2 weight decay (PyTorch semantics,
/// no dampening, no Nesterov). [`ParamKind::NoDecay`] tensors skip decay
/// and step at `lr * no_decay_lr_scale`; buffers are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub no_decay_lr_scale: f64,
    buffers: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, no_decay_lr_scale: 1.0, buffers: vec![None; num_params] }
    }

    /// Momentum buffer per parameter; `None` until the first update.
    pub fn buffers(&self) -> &[Option<ArrayD<F>>] {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Vec<Option<ArrayD<F>>>) {
        self.buffers = buffers;
    }

    /// `buf = momentum * buf + (g + wd * p)`, then `p -= lr * buf`.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: Vec<(ParamId, ArrayD<F>)>, lr: f64) {
        let mom = F::lit(self.momentum);
        for (id, mut g) in grads {
            let kind = store.kind(id);
            let lr = match kind {
                ParamKind::Buffer => continue,
                ParamKind::Weight => F::lit(lr),
                ParamKind::NoDecay => F::lit(lr * self.no_decay_lr_scale),
            };
            let p = store.get_mut(id);
            if kind == ParamKind::Weight && self.weight_decay != 0.0 {
                let wd = F::lit(self.weight_decay);
                Zip::from(&mut g).and(&*p).for_each(|g, &p| *g = *g + wd * p);
            }
            let buf = match self.buffers[id.0].take() {
                Some(mut b) if self.momentum != 0.0 => {
                    Zip::from(&mut b).and(&g).for_each(|b, &g| *b = mom * *b + g);
                    b
                }
                _ => g,
            };
            Zip::from(p).and(&buf).for_each(|p, &b| *p = *p - lr * b);
            self.buffers[id.0] = Some(buf);
        }
    }
}
