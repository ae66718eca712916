use ndarray::{Array2, Array4, Axis, IxDyn};

use super::{init, GradScope, Layer, Mode, Param};
use crate::rng::Prng;
use crate::Scalar;

/// Unrolls sliding windows of `x` into a `[n*pos_h*pos_w, c*kh*kw]` matrix.
///
/// `pos_h`/`pos_w` are the number of window positions per axis; for a plain
/// convolution they equal the output size, for the transposed convolution
/// gradient they equal the *input* size of the transposed layer.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &Array4<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    pos_h: usize,
    pos_w: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let mut col = Array2::<F>::zeros((n * pos_h * pos_w, c * kh * kw));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let cols = col.as_slice_mut().unwrap();
    let row_len = c * kh * kw;
    for ni in 0..n {
        for i in 0..pos_h {
            for j in 0..pos_w {
                let row = ((ni * pos_h + i) * pos_w + j) * row_len;
                for ci in 0..c {
                    for ki in 0..kh {
                        let ih = (i * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_base = ((ni * c + ci) * h + ih as usize) * w;
                        let dst_base = row + (ci * kh + ki) * kw;
                        for kj in 0..kw {
                            let iw = (j * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                cols[dst_base + kj] = xs[src_base + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add inverse of [`im2col`]: accumulates window rows back into an
/// image of shape `[n, c, out_h, out_w]`.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    col: &Array2<F>,
    n: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    pos_h: usize,
    pos_w: usize,
) -> Array4<F> {
    let mut img = Array4::<F>::zeros((n, c, out_h, out_w));
    let col_std = col.as_standard_layout();
    let cols = col_std.as_slice().unwrap();
    let imgs = img.as_slice_mut().unwrap();
    let row_len = c * kh * kw;
    for ni in 0..n {
        for i in 0..pos_h {
            for j in 0..pos_w {
                let row = ((ni * pos_h + i) * pos_w + j) * row_len;
                for ci in 0..c {
                    for ki in 0..kh {
                        let ih = (i * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= out_h as isize {
                            continue;
                        }
                        let dst_base = ((ni * c + ci) * out_h + ih as usize) * out_w;
                        let src_base = row + (ci * kh + ki) * kw;
                        for kj in 0..kw {
                            let iw = (j * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < out_w as isize {
                                imgs[dst_base + iw as usize] =
                                    imgs[dst_base + iw as usize] + cols[src_base + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    img
}

/// `[n, c, h, w] -> [n*h*w, c]` in standard layout.
fn to_channel_last_mat<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let flat = x
        .view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned();
    flat.into_shape_with_order((n * h * w, c)).unwrap()
}

/// `[n*h*w, c] -> [n, c, h, w]` in standard layout.
fn from_channel_last_mat<F: Scalar>(m: Array2<F>, n: usize, h: usize, w: usize) -> Array4<F> {
    let c = m.dim().1;
    let img = m.into_shape_with_order((n, h, w, c)).unwrap();
    img.permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
}

/// Standard 2-D convolution, square kernel, zero padding.
pub struct Conv2d<F: Scalar> {
    weight: Param<F>, // [oc, ic, k, k]
    bias: Param<F>,   // [oc]
    kernel: usize,
    stride: usize,
    pad: usize,
    in_channels: usize,
    out_channels: usize,
    cache: Option<ConvCache<F>>,
}

struct ConvCache<F> {
    col: Array2<F>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Prng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = init::he_normal(
            IxDyn(&[out_channels, in_channels, kernel, kernel]),
            fan_in,
            rng,
        );
        Conv2d {
            weight: Param::new("weight", weight),
            bias: Param::new("bias", ndarray::ArrayD::zeros(IxDyn(&[out_channels]))),
            kernel,
            stride,
            pad,
            in_channels,
            out_channels,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn weight_mat(&self) -> Array2<F> {
        let k = self.in_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, k))
            .unwrap()
            .to_owned()
    }
}

impl<F: Scalar> Layer<F> for Conv2d<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        let col = im2col(&x, self.kernel, self.kernel, self.stride, self.pad, oh, ow);
        let mut y_mat = col.dot(&self.weight_mat().t()); // [n*oh*ow, oc]
        let bias = self
            .bias
            .value
            .view()
            .into_shape_with_order(self.out_channels)
            .unwrap();
        y_mat += &bias;
        self.cache = Some(ConvCache {
            col,
            in_dim: (n, c, h, w),
            out_hw: (oh, ow),
        });
        from_channel_last_mat(y_mat, n, oh, ow)
    }

    fn backward(&mut self, grad_out: Array4<F>, scope: GradScope) -> Array4<F> {
        let cache = self.cache.take().expect("backward without forward");
        let (n, c, h, w) = cache.in_dim;
        let (oh, ow) = cache.out_hw;
        let g_mat = to_channel_last_mat(&grad_out); // [n*oh*ow, oc]
        if scope == GradScope::Full {
            let dw = g_mat.t().dot(&cache.col); // [oc, ic*k*k]
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order(dw.raw_dim())
                .unwrap();
            wg += &dw;
            let db = g_mat.sum_axis(Axis(0));
            let mut bg = self
                .bias
                .grad
                .view_mut()
                .into_shape_with_order(self.out_channels)
                .unwrap();
            bg += &db;
        }
        let dcol = g_mat.dot(&self.weight_mat()); // [n*oh*ow, ic*k*k]
        col2im(
            &dcol,
            n,
            c,
            h,
            w,
            self.kernel,
            self.kernel,
            self.stride,
            self.pad,
            oh,
            ow,
        )
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn kind(&self) -> &'static str {
        "conv2d"
    }
}

/// Transposed 2-D convolution (fractionally-strided upsampling).
pub struct ConvTranspose2d<F: Scalar> {
    weight: Param<F>, // [ic, oc, k, k]
    bias: Param<F>,   // [oc]
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
    in_channels: usize,
    out_channels: usize,
    cache: Option<(Array2<F>, (usize, usize, usize, usize))>,
}

impl<F: Scalar> ConvTranspose2d<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut Prng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = init::he_normal(
            IxDyn(&[in_channels, out_channels, kernel, kernel]),
            fan_in,
            rng,
        );
        ConvTranspose2d {
            weight: Param::new("weight", weight),
            bias: Param::new("bias", ndarray::ArrayD::zeros(IxDyn(&[out_channels]))),
            kernel,
            stride,
            pad,
            output_pad,
            in_channels,
            out_channels,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel + self.output_pad - 2 * self.pad,
            (w - 1) * self.stride + self.kernel + self.output_pad - 2 * self.pad,
        )
    }

    fn weight_mat(&self) -> Array2<F> {
        let k = self.out_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.in_channels, k))
            .unwrap()
            .to_owned()
    }
}

impl<F: Scalar> Layer<F> for ConvTranspose2d<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv-transpose input channels");
        let (oh, ow) = self.output_hw(h, w);
        let x_mat = to_channel_last_mat(&x); // [n*h*w, ic]
        let col = x_mat.dot(&self.weight_mat()); // [n*h*w, oc*k*k]
        let mut y = col2im(
            &col,
            n,
            self.out_channels,
            oh,
            ow,
            self.kernel,
            self.kernel,
            self.stride,
            self.pad,
            h,
            w,
        );
        let bias = self
            .bias
            .value
            .view()
            .into_shape_with_order((1, self.out_channels, 1, 1))
            .unwrap();
        y += &bias;
        self.cache = Some((x_mat, (n, c, h, w)));
        y
    }

    fn backward(&mut self, grad_out: Array4<F>, scope: GradScope) -> Array4<F> {
        let (x_mat, (n, _c, h, w)) = self.cache.take().expect("backward without forward");
        let gcol = im2col(
            &grad_out,
            self.kernel,
            self.kernel,
            self.stride,
            self.pad,
            h,
            w,
        ); // [n*h*w, oc*k*k]
        if scope == GradScope::Full {
            let dw = x_mat.t().dot(&gcol); // [ic, oc*k*k]
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order(dw.raw_dim())
                .unwrap();
            wg += &dw;
            let db = grad_out
                .sum_axis(Axis(3))
                .sum_axis(Axis(2))
                .sum_axis(Axis(0));
            let mut bg = self
                .bias
                .grad
                .view_mut()
                .into_shape_with_order(self.out_channels)
                .unwrap();
            bg += &db;
        }
        let dx_mat = gcol.dot(&self.weight_mat().t()); // [n*h*w, ic]
        from_channel_last_mat(dx_mat, n, h, w)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn kind(&self) -> &'static str {
        "conv_transpose2d"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn im2col_col2im_shapes() {
        let x = Array4::<f64>::from_shape_fn((2, 3, 5, 5), |(n, c, i, j)| {
            (n * 100 + c * 25 + i * 5 + j) as f64
        });
        let col = im2col(&x, 3, 3, 1, 1, 5, 5);
        assert_eq!(col.dim(), (2 * 25, 27));
        // center kernel tap of the first window at pad 1 is x[0,0,0,0]
        assert_eq!(col[[0, 4]], 0.0);
        let img = col2im(&col, 2, 3, 5, 5, 3, 3, 1, 1, 5, 5);
        // interior pixels appear in 9 windows
        assert_eq!(img[[0, 0, 2, 2]], 9.0 * x[[0, 0, 2, 2]]);
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut rng = seeded(0);
        let mut up = ConvTranspose2d::<f32>::new(4, 2, 4, 2, 1, 0, &mut rng);
        let x = Array4::<f32>::zeros((1, 4, 7, 7));
        let y = up.forward(x, Mode::Eval);
        assert_eq!(y.dim(), (1, 2, 14, 14));
    }
}
