use ndarray::{Array2, Array4, Axis, IxDyn};

use super::{init, GradScope, Layer, Mode, Param};
use crate::rng::Prng;
use crate::Scalar;

/// Collapses `[n, c, h, w]` to `[n, c*h*w, 1, 1]` so dense layers can live
/// in the same stack as convolutions.
pub struct Flatten {
    in_dim: Option<(usize, usize, usize, usize)>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten { in_dim: None }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Layer<F> for Flatten {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let dim = x.dim();
        self.in_dim = Some(dim);
        let (n, c, h, w) = dim;
        x.into_shape_with_order((n, c * h * w, 1, 1)).unwrap()
    }

    fn backward(&mut self, grad_out: Array4<F>, _scope: GradScope) -> Array4<F> {
        let dim = self.in_dim.take().expect("backward without forward");
        grad_out.into_shape_with_order(dim).unwrap()
    }

    fn kind(&self) -> &'static str {
        "flatten"
    }
}

/// Fully-connected layer on `[n, features, 1, 1]` activations.
pub struct Dense<F: Scalar> {
    weight: Param<F>, // [in, out]
    bias: Param<F>,   // [out]
    in_features: usize,
    out_features: usize,
    cache: Option<Array2<F>>,
}

impl<F: Scalar> Dense<F> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Prng) -> Self {
        let weight = init::he_normal(IxDyn(&[in_features, out_features]), in_features, rng);
        Dense {
            weight: Param::new("weight", weight),
            bias: Param::new("bias", ndarray::ArrayD::zeros(IxDyn(&[out_features]))),
            in_features,
            out_features,
            cache: None,
        }
    }

    fn weight_mat(&self) -> ndarray::ArrayView2<'_, F> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.in_features, self.out_features))
            .unwrap()
    }
}

impl<F: Scalar> Layer<F> for Dense<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(
            (c, h, w),
            (self.in_features, 1, 1),
            "dense expects flattened input"
        );
        let x2 = x.into_shape_with_order((n, self.in_features)).unwrap();
        let mut y = x2.dot(&self.weight_mat());
        let bias = self
            .bias
            .value
            .view()
            .into_shape_with_order(self.out_features)
            .unwrap();
        y += &bias;
        self.cache = Some(x2);
        let y = y.as_standard_layout().into_owned();
        y.into_shape_with_order((n, self.out_features, 1, 1)).unwrap()
    }

    fn backward(&mut self, grad_out: Array4<F>, scope: GradScope) -> Array4<F> {
        let x2 = self.cache.take().expect("backward without forward");
        let n = grad_out.dim().0;
        let g2 = grad_out
            .into_shape_with_order((n, self.out_features))
            .unwrap();
        if scope == GradScope::Full {
            let dw = x2.t().dot(&g2);
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order(dw.raw_dim())
                .unwrap();
            wg += &dw;
            let db = g2.sum_axis(Axis(0));
            let mut bg = self
                .bias
                .grad
                .view_mut()
                .into_shape_with_order(self.out_features)
                .unwrap();
            bg += &db;
        }
        // `dot` may hand back a column-major result when a dimension is 1
        let gx = g2.dot(&self.weight_mat().t());
        let gx = gx.as_standard_layout().into_owned();
        gx.into_shape_with_order((n, self.in_features, 1, 1)).unwrap()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn kind(&self) -> &'static str {
        "dense"
    }
}
