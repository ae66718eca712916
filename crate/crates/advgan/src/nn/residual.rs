use ndarray::Array4;

use super::{Conv2d, GradScope, InstanceNorm, Layer, Mode, Param, Relu};
use crate::rng::Prng;
use crate::Scalar;

/// Pre-activation-free residual block: conv-norm-relu-conv-norm plus the
/// identity skip, as used in image-to-image translation generators.
pub struct ResidualBlock<F: Scalar> {
    conv1: Conv2d<F>,
    norm1: InstanceNorm<F>,
    relu: Relu<F>,
    conv2: Conv2d<F>,
    norm2: InstanceNorm<F>,
}

impl<F: Scalar> ResidualBlock<F> {
    pub fn new(channels: usize, rng: &mut Prng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(channels, channels, 3, 1, 1, rng),
            norm1: InstanceNorm::new(channels),
            relu: Relu::new(),
            conv2: Conv2d::new(channels, channels, 3, 1, 1, rng),
            norm2: InstanceNorm::new(channels),
        }
    }
}

impl<F: Scalar> Layer<F> for ResidualBlock<F> {
    fn forward(&mut self, x: Array4<F>, mode: Mode) -> Array4<F> {
        let mut y = self.conv1.forward(x.clone(), mode);
        y = self.norm1.forward(y, mode);
        y = self.relu.forward(y, mode);
        y = self.conv2.forward(y, mode);
        y = self.norm2.forward(y, mode);
        y + x
    }

    fn backward(&mut self, grad_out: Array4<F>, scope: GradScope) -> Array4<F> {
        let mut g = self.norm2.backward(grad_out.clone(), scope);
        g = self.conv2.backward(g, scope);
        g = self.relu.backward(g, scope);
        g = self.norm1.backward(g, scope);
        g = self.conv1.backward(g, scope);
        g + grad_out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut ps = self.conv1.params_mut();
        ps.extend(self.norm1.params_mut());
        ps.extend(self.conv2.params_mut());
        ps.extend(self.norm2.params_mut());
        ps
    }

    fn kind(&self) -> &'static str {
        "residual_block"
    }
}
