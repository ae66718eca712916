use ndarray::Array4;

use super::{GradScope, Layer, Mode};
use crate::Scalar;

/// Non-overlapping max pooling with a square window.
pub struct MaxPool2d<F> {
    size: usize,
    // (input dim, flat argmax index per output element)
    cache: Option<((usize, usize, usize, usize), Vec<usize>)>,
    _marker: std::marker::PhantomData<F>,
}

impl<F> MaxPool2d<F> {
    pub fn new(size: usize) -> Self {
        MaxPool2d {
            size,
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F: Scalar> Layer<F> for MaxPool2d<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let s = self.size;
        let (oh, ow) = (h / s, w / s);
        let xs = x.as_slice().expect("pool input must be standard layout");
        let mut y = Array4::<F>::zeros((n, c, oh, ow));
        let ys = y.as_slice_mut().unwrap();
        let mut argmax = vec![0usize; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = nc * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = plane + (i * s) * w + j * s;
                    let mut best_v = xs[best];
                    for ki in 0..s {
                        for kj in 0..s {
                            let idx = plane + (i * s + ki) * w + (j * s + kj);
                            if xs[idx] > best_v {
                                best_v = xs[idx];
                                best = idx;
                            }
                        }
                    }
                    let out = nc * oh * ow + i * ow + j;
                    ys[out] = best_v;
                    argmax[out] = best;
                }
            }
        }
        self.cache = Some(((n, c, h, w), argmax));
        y
    }

    fn backward(&mut self, grad_out: Array4<F>, _scope: GradScope) -> Array4<F> {
        let ((n, c, h, w), argmax) = self.cache.take().expect("backward without forward");
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        let gxs = gx.as_slice_mut().unwrap();
        let gos = grad_out.as_slice().expect("grad must be standard layout");
        for (out, &src) in argmax.iter().enumerate() {
            gxs[src] = gxs[src] + gos[out];
        }
        gx
    }

    fn kind(&self) -> &'static str {
        "max_pool2d"
    }
}
