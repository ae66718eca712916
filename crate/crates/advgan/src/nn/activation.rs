use ndarray::Array4;

use super::{GradScope, Layer, Mode};
use crate::Scalar;

pub struct Relu<F> {
    mask: Option<Array4<F>>,
}

impl<F> Relu<F> {
    pub fn new() -> Self {
        Relu { mask: None }
    }
}

impl<F> Default for Relu<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Layer<F> for Relu<F> {
    fn forward(&mut self, mut x: Array4<F>, _mode: Mode) -> Array4<F> {
        let mask = x.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
        x.zip_mut_with(&mask, |v, &m| *v = *v * m);
        self.mask = Some(mask);
        x
    }

    fn backward(&mut self, mut grad_out: Array4<F>, _scope: GradScope) -> Array4<F> {
        let mask = self.mask.take().expect("backward without forward");
        grad_out.zip_mut_with(&mask, |g, &m| *g = *g * m);
        grad_out
    }

    fn kind(&self) -> &'static str {
        "relu"
    }
}

pub struct Tanh<F> {
    output: Option<Array4<F>>,
}

impl<F> Tanh<F> {
    pub fn new() -> Self {
        Tanh { output: None }
    }
}

impl<F> Default for Tanh<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Layer<F> for Tanh<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let y = x.mapv(|v| v.tanh());
        self.output = Some(y.clone());
        y
    }

    fn backward(&mut self, mut grad_out: Array4<F>, _scope: GradScope) -> Array4<F> {
        let y = self.output.take().expect("backward without forward");
        grad_out.zip_mut_with(&y, |g, &t| *g = *g * (F::one() - t * t));
        grad_out
    }

    fn kind(&self) -> &'static str {
        "tanh"
    }
}
