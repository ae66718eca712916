use ndarray::ArrayD;

use super::Param;
use crate::Scalar;

/// Adaptive-moment gradient descent. Moment buffers are keyed by parameter
/// order, so an optimizer instance is tied to one model.
pub struct Adam<F: Scalar> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(ArrayD::zeros(p.value.raw_dim()));
                self.v.push(ArrayD::zeros(p.value.raw_dim()));
            }
        }
        assert_eq!(self.m.len(), params.len(), "optimizer bound to another model");
        self.t += 1;
        let b1 = F::from_f64(self.beta1).unwrap();
        let b2 = F::from_f64(self.beta2).unwrap();
        let one = F::one();
        let bias1 = F::from_f64(1.0 - self.beta1.powi(self.t)).unwrap();
        let bias2 = F::from_f64(1.0 - self.beta2.powi(self.t)).unwrap();
        let lr = F::from_f64(self.lr).unwrap();
        let eps = F::from_f64(self.eps).unwrap();
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bias1;
                    let vhat = *v / bias2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
