use ndarray::{Array4, IxDyn};

use super::{GradScope, Layer, Mode, Param};
use crate::Scalar;

/// Instance normalization with affine scale and shift: each (sample,
/// channel) plane is normalized over its spatial extent.
pub struct InstanceNorm<F: Scalar> {
    gamma: Param<F>, // [c]
    beta: Param<F>,  // [c]
    channels: usize,
    eps: f64,
    cache: Option<Cache<F>>,
}

struct Cache<F> {
    xhat: Array4<F>,
    inv_std: Vec<F>, // per (n, c)
}

impl<F: Scalar> InstanceNorm<F> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Param::new("gamma", ndarray::ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new("beta", ndarray::ArrayD::zeros(IxDyn(&[channels]))),
            channels,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl<F: Scalar> Layer<F> for InstanceNorm<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "instance-norm channels");
        let m = (h * w) as f64;
        let xs = x.as_slice().expect("norm input must be standard layout");
        let mut xhat = Array4::<F>::zeros((n, c, h, w));
        let xh = xhat.as_slice_mut().unwrap();
        let mut y = Array4::<F>::zeros((n, c, h, w));
        let ys = y.as_slice_mut().unwrap();
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        let mut inv_std = Vec::with_capacity(n * c);
        for nc in 0..n * c {
            let base = nc * h * w;
            let plane = &xs[base..base + h * w];
            let mean = plane.iter().map(|&v| v.to_f64().unwrap()).sum::<f64>() / m;
            let var = plane
                .iter()
                .map(|&v| {
                    let d = v.to_f64().unwrap() - mean;
                    d * d
                })
                .sum::<f64>()
                / m;
            let istd = 1.0 / (var + self.eps).sqrt();
            let mean_f = F::from_f64(mean).unwrap();
            let istd_f = F::from_f64(istd).unwrap();
            inv_std.push(istd_f);
            let (g, b) = (gamma[nc % c], beta[nc % c]);
            for i in 0..h * w {
                let xn = (xs[base + i] - mean_f) * istd_f;
                xh[base + i] = xn;
                ys[base + i] = g * xn + b;
            }
        }
        self.cache = Some(Cache { xhat, inv_std });
        y
    }

    fn backward(&mut self, grad_out: Array4<F>, scope: GradScope) -> Array4<F> {
        let Cache { xhat, inv_std } = self.cache.take().expect("backward without forward");
        let (n, c, h, w) = xhat.dim();
        let m = F::from_usize(h * w).unwrap();
        let gos = grad_out.as_slice().expect("grad must be standard layout");
        let xh = xhat.as_slice().unwrap();
        let gamma = self.gamma.value.as_slice().unwrap().to_vec();
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        let gxs = gx.as_slice_mut().unwrap();
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for nc in 0..n * c {
            let base = nc * h * w;
            let ch = nc % c;
            let g = gamma[ch];
            let istd = inv_std[nc];
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for i in 0..h * w {
                let dy = gos[base + i];
                let dxhat = dy * g;
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xh[base + i];
                dgamma[ch] = dgamma[ch] + dy * xh[base + i];
                dbeta[ch] = dbeta[ch] + dy;
            }
            let scale = istd / m;
            for i in 0..h * w {
                let dxhat = gos[base + i] * g;
                gxs[base + i] =
                    scale * (m * dxhat - sum_dxhat - xh[base + i] * sum_dxhat_xhat);
            }
        }
        if scope == GradScope::Full {
            let gg = self.gamma.grad.as_slice_mut().unwrap();
            let bg = self.beta.grad.as_slice_mut().unwrap();
            for ch in 0..c {
                gg[ch] = gg[ch] + dgamma[ch];
                bg[ch] = bg[ch] + dbeta[ch];
            }
        }
        gx
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn kind(&self) -> &'static str {
        "instance_norm"
    }
}
