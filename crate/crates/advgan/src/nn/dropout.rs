use ndarray::Array4;
use rand::Rng;

use super::{GradScope, Layer, Mode};
use crate::rng::Prng;
use crate::Scalar;

/// Inverted dropout; identity in eval mode. Each instance owns its seeded
/// stream so training replays exactly for a fixed model seed.
pub struct Dropout<F> {
    p: f64,
    rng: Prng,
    mask: Option<Array4<F>>,
}

impl<F> Dropout<F> {
    pub fn new(p: f64, rng: Prng) -> Self {
        assert!((0.0..1.0).contains(&p));
        Dropout { p, rng, mask: None }
    }
}

impl<F: Scalar> Layer<F> for Dropout<F> {
    fn forward(&mut self, mut x: Array4<F>, mode: Mode) -> Array4<F> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.mask = None;
            return x;
        }
        let keep = F::from_f64(1.0 - self.p).unwrap();
        let scale = F::one() / keep;
        let mask = Array4::from_shape_simple_fn(x.raw_dim(), || {
            if self.rng.gen::<f64>() < self.p {
                F::zero()
            } else {
                scale
            }
        });
        x.zip_mut_with(&mask, |v, &m| *v = *v * m);
        self.mask = Some(mask);
        x
    }

    fn backward(&mut self, mut grad_out: Array4<F>, _scope: GradScope) -> Array4<F> {
        if let Some(mask) = self.mask.take() {
            grad_out.zip_mut_with(&mask, |g, &m| *g = *g * m);
        }
        grad_out
    }

    fn kind(&self) -> &'static str {
        "dropout"
    }
}
