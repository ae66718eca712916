//! Seeded parameter initialization.

use ndarray::{ArrayD, IxDyn};

use crate::rng::{sample_normal, Prng};
use crate::Scalar;

/// He-normal initialization: N(0, 2/fan_in).
pub fn he_normal<F: Scalar>(shape: IxDyn, fan_in: usize, rng: &mut Prng) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(shape, || {
        F::from_f64(sample_normal(rng) * std).unwrap()
    })
}

/// Scaled normal initialization with explicit standard deviation.
pub fn normal<F: Scalar>(shape: IxDyn, std: f64, rng: &mut Prng) -> ArrayD<F> {
    ArrayD::from_shape_simple_fn(shape, || F::from_f64(sample_normal(rng) * std).unwrap())
}
