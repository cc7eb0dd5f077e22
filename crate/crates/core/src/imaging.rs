//! Grid resampling and smoothing shared by feature assembly and score post-processing.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

/// Source-coordinate weights for one output axis under half-pixel
/// (corner-unaligned) bilinear sampling.
fn axis_weights(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a single plane without corner alignment.
pub fn resize_bilinear_2d(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let wy = axis_weights(h, out_h);
    let wx = axis_weights(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, ly) = wy[y];
        let (x0, x1, lx) = wx[x];
        let top = src[[y0, x0]] * (1.0 - lx) + src[[y0, x1]] * lx;
        let bottom = src[[y1, x0]] * (1.0 - lx) + src[[y1, x1]] * lx;
        top * (1.0 - ly) + bottom * ly
    })
}

/// Channel-wise bilinear resize of a `C x H x W` array.
pub fn resize_bilinear(src: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    for (plane, mut dst) in src.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        dst.assign(&resize_bilinear_2d(plane, out_h, out_w));
    }
    out
}

/// Normalized 1-D Gaussian kernel truncated at four standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as usize;
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * (x / sigma).powi(2)).exp()
        })
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    kernel
}

// Half-sample symmetric reflection: d c b a | a b c d | d c b a
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn convolve_rows(src: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = src.dim();
    let radius = (kernel.len() / 2) as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wk)| wk * src[[y, reflect(x as isize + k as isize - radius, w)]])
            .sum()
    })
}

/// Separable Gaussian blur with reflective borders. `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(src: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return src.to_owned();
    }
    let kernel = gaussian_kernel(sigma);
    let rows = convolve_rows(&src.to_owned(), &kernel);
    convolve_rows(&rows.reversed_axes(), &kernel).reversed_axes()
}
