use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

fn dims4(shape: &[usize], what: &str) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "{what}: expected NCHW, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

fn out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    assert!(input + 2 * padding >= kernel, "kernel {kernel} larger than padded input {input}+2*{padding}");
    (input + 2 * padding - kernel) / stride + 1
}

/// Unfolds `x` into a `[c*kh*kw, n*ho*wo]` patch matrix.
fn im2col<F: Real>(xs: &[F], [n, c, h, w]: [usize; 4], kh: usize, kw: usize, ho: usize, wo: usize, cfg: &Conv2dConfig) -> Array2<F> {
    let rows = c * kh * kw;
    let cols = n * ho * wo;
    let mut col = vec![F::zero(); rows * cols];
    let (s, p) = (cfg.stride, cfg.padding as isize);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let dst = &mut col[r * cols..(r + 1) * cols];
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * s + ki) as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &xs[base + ih as usize * w..base + (ih as usize + 1) * w];
                        let drow = &mut dst[(ni * ho + oh) * wo..(ni * ho + oh + 1) * wo];
                        for (ow, d) in drow.iter_mut().enumerate() {
                            let iw = (ow * s + kj) as isize - p;
                            if iw >= 0 && iw < w as isize {
                                *d = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), col).expect("im2col shape")
}

fn col2im<F: Real>(col: &[F], [n, c, h, w]: [usize; 4], kh: usize, kw: usize, ho: usize, wo: usize, cfg: &Conv2dConfig) -> Vec<F> {
    let cols = n * ho * wo;
    let mut dx = vec![F::zero(); n * c * h * w];
    let (s, p) = (cfg.stride, cfg.padding as isize);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let src = &col[r * cols..(r + 1) * cols];
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * s + ki) as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let drow = &mut dx[base + ih as usize * w..base + (ih as usize + 1) * w];
                        let srow = &src[(ni * ho + oh) * wo..(ni * ho + oh + 1) * wo];
                        for (ow, &v) in srow.iter().enumerate() {
                            let iw = (ow * s + kj) as isize - p;
                            if iw >= 0 && iw < w as isize {
                                drow[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv2d_forward<F: Real>(x: &ArrayD<F>, w: &ArrayD<F>, cfg: &Conv2dConfig) -> (ArrayD<F>, Array2<F>, [usize; 4]) {
    let in_shape = dims4(x.shape(), "conv2d input");
    let [co, ci, kh, kw] = dims4(w.shape(), "conv2d weight");
    let [n, c, h, wd] = in_shape;
    assert_eq!(ci, c, "conv2d: weight expects {ci} input channels, got {c}");
    let ho = out_size(h, kh, cfg.stride, cfg.padding);
    let wo = out_size(wd, kw, cfg.stride, cfg.padding);

    let xs = x.as_standard_layout();
    let col = im2col(xs.as_slice().expect("standard layout"), in_shape, kh, kw, ho, wo, cfg);
    let wstd = w.as_standard_layout();
    let w2 = wstd.view().into_shape_with_order((co, c * kh * kw)).expect("weight as matrix");
    let out2 = w2.dot(&col);
    let out = out2
        .into_shape_with_order((co, n, ho * wo))
        .expect("conv output")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[n, co, ho, wo]))
        .expect("conv output NCHW");
    (out, col, in_shape)
}

pub(crate) fn conv2d_backward<F: Real>(
    g: &ArrayD<F>,
    col: &Array2<F>,
    w: &ArrayD<F>,
    in_shape: [usize; 4],
    cfg: &Conv2dConfig,
    need_x: bool,
    need_w: bool,
) -> (Option<ArrayD<F>>, Option<ArrayD<F>>) {
    let [n, co, ho, wo] = dims4(g.shape(), "conv2d grad");
    let [_, ci, kh, kw] = dims4(w.shape(), "conv2d weight");
    let g2 = g
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, co, ho * wo))
        .expect("grad as 3-d")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, n * ho * wo))
        .expect("grad as matrix");

    let dw = need_w.then(|| {
        g2.dot(&col.t())
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[co, ci, kh, kw]))
            .expect("weight grad")
    });
    let dx = need_x.then(|| {
        let wstd = w.as_standard_layout();
        let w2 = wstd.view().into_shape_with_order((co, ci * kh * kw)).expect("weight as matrix");
        let dcol = w2.t().dot(&g2);
        let dcol = dcol.as_standard_layout();
        let dx = col2im(dcol.as_slice().expect("standard layout"), in_shape, kh, kw, ho, wo, cfg);
        ArrayD::from_shape_vec(IxDyn(&in_shape), dx).expect("input grad")
    });
    (dx, dw)
}

pub(crate) fn max_pool2d_forward<F: Real>(x: &ArrayD<F>, k: usize, s: usize, p: usize) -> (ArrayD<F>, Vec<usize>) {
    let [n, c, h, w] = dims4(x.shape(), "max_pool2d input");
    let ho = out_size(h, k, s, p);
    let wo = out_size(w, k, s, p);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = F::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..k {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * w + iw as usize;
                        if best_i == usize::MAX || xs[idx] > best {
                            best = xs[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    let out = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).expect("pool output");
    (out, argmax)
}

pub(crate) fn global_avg_pool<F: Real>(x: &ArrayD<F>) -> ArrayD<F> {
    let [n, c, h, w] = dims4(x.shape(), "global_avg_pool input");
    let hw = h * w;
    let inv = F::one() / F::lit(hw as f64);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let out: Vec<F> = xs.chunks_exact(hw).map(|p| p.iter().copied().sum::<F>() * inv).collect();
    ArrayD::from_shape_vec(IxDyn(&[n, c]), out).expect("pooled shape")
}
