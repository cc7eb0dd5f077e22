//! Inference-only convolution primitives for the frozen feature extractors.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};

/// A 2-D convolution with optional bias. Weights are `out x in x kh x kw`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Option<Array1<f64>>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, input: ArrayView3<f64>) -> Array3<f64> {
        let (out_c, in_c, kh, kw) = self.weight.dim();
        let (c, h, w) = input.dim();
        assert_eq!(c, in_c, "conv input channels");
        let (oh, ow) = self.output_size(h, w);
        let cols = im2col(input, kh, kw, self.stride, self.padding, oh, ow);
        let kernel = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * kh * kw))
            .expect("contiguous conv weight");
        let mut out = kernel.dot(&cols);
        if let Some(bias) = &self.bias {
            for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                row += *b;
            }
        }
        out.into_shape_with_order((out_c, oh, ow))
            .expect("conv output reshape")
    }

    /// Fold an inference-mode batch norm into this convolution.
    pub fn fold_batch_norm(mut self, bn: &BatchNorm) -> Self {
        let scale = bn.scale();
        let shift = &bn.bias - &(&bn.running_mean * &scale);
        for (mut filter, s) in self.weight.axis_iter_mut(Axis(0)).zip(scale.iter()) {
            filter *= *s;
        }
        let bias = match self.bias.take() {
            Some(b) => b * &scale + &shift,
            None => shift,
        };
        self.bias = Some(bias);
        self
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
}

impl BatchNorm {
    fn scale(&self) -> Array1<f64> {
        &self.weight / &self.running_var.mapv(|v| (v + self.eps).sqrt())
    }
}

fn im2col(
    input: ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = input.dim();
    if kh == 1 && kw == 1 && pad == 0 {
        let sub = input.slice(s![.., ..;stride, ..;stride]);
        return sub
            .to_owned()
            .into_shape_with_order((c, oh * ow))
            .expect("1x1 im2col");
    }
    let mut cols = Array2::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = input[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Non-overlapping average pooling with window and stride `k`.
pub fn avg_pool(x: ArrayView3<f64>, k: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / k, w / k);
    let norm = (k * k) as f64;
    Array3::from_shape_fn((c, oh, ow), |(ci, y, xx)| {
        x.slice(s![ci, y * k..(y + 1) * k, xx * k..(xx + 1) * k]).sum() / norm
    })
}

/// Max pooling with padding that never wins (PyTorch semantics).
pub fn max_pool(x: ArrayView3<f64>, kernel: usize, stride: usize, pad: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    Array3::from_shape_fn((c, oh, ow), |(ci, oy, ox)| {
        let mut best = f64::NEG_INFINITY;
        for ky in 0..kernel {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..kernel {
                let ix = (ox * stride + kx) as isize - pad as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                best = best.max(x[[ci, iy as usize, ix as usize]]);
            }
        }
        best
    })
}
