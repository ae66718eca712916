use ndarray::{Array4, ArrayD};

use super::{GradScope, Mode};
use crate::Scalar;

/// A named tensor with its accumulated gradient.
pub struct Param<F> {
    pub name: &'static str,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: &'static str, value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { name, value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// One differentiable layer. `forward` caches whatever `backward` needs;
/// a `backward` call consumes the most recent cache.
pub trait Layer<F: Scalar> {
    fn forward(&mut self, x: Array4<F>, mode: Mode) -> Array4<F>;

    /// Propagates `grad_out` to the layer input, accumulating parameter
    /// gradients when `scope` is `Full`.
    fn backward(&mut self, grad_out: Array4<F>, scope: GradScope) -> Array4<F>;

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        Vec::new()
    }

    fn kind(&self) -> &'static str;
}

/// A plain sequential stack of layers.
pub struct Network<F: Scalar> {
    pub layers: Vec<Box<dyn Layer<F>>>,
}

impl<F: Scalar> Network<F> {
    pub fn new(layers: Vec<Box<dyn Layer<F>>>) -> Self {
        Network { layers }
    }

    pub fn forward(&mut self, mut x: Array4<F>, mode: Mode) -> Array4<F> {
        for layer in &mut self.layers {
            x = layer.forward(x, mode);
        }
        x
    }

    pub fn backward(&mut self, mut grad: Array4<F>, scope: GradScope) -> Array4<F> {
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(grad, scope);
        }
        grad
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }

    /// Stable `layerN.param` names for checkpoint manifests.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params_mut()
                    .into_iter()
                    .map(move |p| (format!("layer{i}.{}", p.name), p))
            })
            .collect()
    }
}
