//! Single-sample CPU kernels with hand-written backward passes.
//!
//! Activations are `[C, H, W]` arrays. Convolutions run im2col + GEMM over
//! row tiles and keep a copy of their input for the backward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis};

use crate::resample;

/// Shape and parameter offsets of a square, stride-1, same-padding conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    fn k_dim(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let w = &params[self.weight_offset..self.weight_offset + self.weight_len()];
        ArrayView2::from_shape((self.cout, self.k_dim()), w).expect("weight slice")
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.bias_offset..self.bias_offset + self.cout]
    }
}

/// Target size in elements of one column tile (fits in L2).
const TILE_ELEMS: usize = 32 * 1024;

/// Output rows per tile for a conv with column height `k_dim`.
fn tile_rows(k_dim: usize, w: usize) -> usize {
    (TILE_ELEMS / (k_dim * w).max(1)).max(1)
}

/// Column matrix `[cin * k * k, (y1 - y0) * w]` for output rows `y0..y1`,
/// zero padding `k / 2`.
fn im2col_rows(x: &[f64], c: usize, h: usize, w: usize, kernel: usize, y0: usize, y1: usize) -> Array2<f64> {
    let pad = (kernel / 2) as isize;
    let rows = y1 - y0;
    let mut cols = Array2::<f64>::zeros((c * kernel * kernel, rows * w));
    let dst_all = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut dst_all[row * rows * w..(row + 1) * rows * w];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize) - dx).clamp(0, w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                let sx0 = (x0 as isize + dx) as usize;
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w + sx0..sy as usize * w + sx0 + (x1 - x0)];
                    let o = (y - y0) * w;
                    dst[o + x0..o + x1].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_rows`], accumulated into `out` (`[c, h, w]` flat).
#[allow(clippy::too_many_arguments)]
fn col2im_rows(cols: &Array2<f64>, out: &mut [f64], c: usize, h: usize, w: usize, kernel: usize, y0: usize, y1: usize) {
    let pad = (kernel / 2) as isize;
    let rows = y1 - y0;
    let src_all = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &src_all[row * rows * w..(row + 1) * rows * w];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize) - dx).clamp(0, w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                let sx0 = (x0 as isize + dx) as usize;
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w + sx0..sy as usize * w + sx0 + (x1 - x0)];
                    let o = (y - y0) * w;
                    for (d, s) in dst.iter_mut().zip(&src[o + x0..o + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Conv forward with zero padding `k / 2`. Returns the output and an owned
/// copy of the input for the backward pass.
pub fn conv_forward(shape: &ConvShape, params: &[f64], x: ArrayView3<f64>) -> (Array3<f64>, Array3<f64>) {
    let (c, h, w) = x.dim();
    assert_eq!(c, shape.cin, "conv input channels");
    let x = x.as_standard_layout().into_owned();
    let xs = x.as_slice().expect("standard layout");
    let wt = shape.weights(params);
    let mut y = Array2::<f64>::zeros((shape.cout, h * w));
    for (mut row, &b) in y.outer_iter_mut().zip(shape.bias(params)) {
        row.fill(b);
    }
    let step = tile_rows(shape.k_dim(), w);
    for y0 in (0..h).step_by(step) {
        let y1 = (y0 + step).min(h);
        let cols = im2col_rows(xs, c, h, w, shape.kernel, y0, y1);
        let mut out = y.slice_mut(s![.., y0 * w..y1 * w]);
        // Pixels as the long GEMM dimension, output channels as the short one.
        let mut out_t = out.view_mut().reversed_axes();
        general_mat_mul(1.0, &cols.t(), &wt.t(), 1.0, &mut out_t);
    }
    (y.into_shape_with_order((shape.cout, h, w)).expect("conv output"), x)
}

/// Conv backward: accumulates parameter gradients into `grad` and returns
/// the input gradient. `input` is the array returned by [`conv_forward`].
pub fn conv_backward(
    shape: &ConvShape,
    params: &[f64],
    input: &Array3<f64>,
    dy: ArrayView3<f64>,
    grad: &mut [f64],
    need_input_grad: bool,
) -> Option<Array3<f64>> {
    let (c, h, w) = input.dim();
    let xs = input.as_slice().expect("standard layout");
    let dy = dy.as_standard_layout();
    let dy2 = dy.to_shape((shape.cout, h * w)).expect("contiguous");
    let gb = &mut grad[shape.bias_offset..shape.bias_offset + shape.cout];
    for (g, row) in gb.iter_mut().zip(dy2.outer_iter()) {
        *g += row.sum();
    }
    let wt = shape.weights(params);
    let mut dx = need_input_grad.then(|| Array3::<f64>::zeros((c, h, w)));
    let mut gw = Array2::<f64>::zeros((shape.k_dim(), shape.cout));
    let step = tile_rows(shape.k_dim(), w);
    for y0 in (0..h).step_by(step) {
        let y1 = (y0 + step).min(h);
        let cols = im2col_rows(xs, c, h, w, shape.kernel, y0, y1);
        let g = dy2.slice(s![.., y0 * w..y1 * w]);
        general_mat_mul(1.0, &cols, &g.t(), 1.0, &mut gw);
        if let Some(dx) = dx.as_mut() {
            let mut dcols = Array2::<f64>::zeros(cols.dim());
            general_mat_mul(1.0, &wt.t(), &g, 0.0, &mut dcols);
            col2im_rows(
                &dcols,
                dx.as_slice_mut().expect("fresh array"),
                c,
                h,
                w,
                shape.kernel,
                y0,
                y1,
            );
        }
    }
    let gw_dst = &mut grad[shape.weight_offset..shape.weight_offset + shape.weight_len()];
    let gw_dst = ArrayViewMut2::from_shape((shape.cout, shape.k_dim()), gw_dst).expect("weight grad");
    ndarray::Zip::from(gw_dst).and(gw.t()).for_each(|d, &v| *d += v);
    dx
}

/// Affine per-channel normalization over the spatial plane of one sample.
/// Has no running statistics, so training and evaluation behave alike.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormShape {
    pub channels: usize,
    pub gamma_offset: usize,
    pub beta_offset: usize,
}

pub const NORM_EPS: f64 = 1e-5;

/// Normalized activations and per-channel `1 / sqrt(var + eps)`, kept for
/// the backward pass.
pub struct NormCache {
    pub xhat: Array3<f64>,
    pub inv_std: Vec<f64>,
}

pub fn instance_norm_forward(shape: &NormShape, params: &[f64], x: &Array3<f64>) -> (Array3<f64>, NormCache) {
    let n = (x.shape()[1] * x.shape()[2]) as f64;
    let mut xhat = x.clone();
    let mut out = Array3::<f64>::zeros(x.raw_dim());
    let mut inv_std = Vec::with_capacity(shape.channels);
    for (c, (mut xh, mut o)) in xhat.outer_iter_mut().zip(out.outer_iter_mut()).enumerate() {
        let mean = xh.sum() / n;
        let var = xh.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        xh.mapv_inplace(|v| (v - mean) * is);
        let (g, b) = (params[shape.gamma_offset + c], params[shape.beta_offset + c]);
        ndarray::Zip::from(&mut o).and(&xh).for_each(|o, &v| *o = g * v + b);
        inv_std.push(is);
    }
    (out, NormCache { xhat, inv_std })
}

/// Accumulates the gamma/beta gradients and returns the input gradient.
pub fn instance_norm_backward(
    shape: &NormShape,
    params: &[f64],
    cache: &NormCache,
    dy: &Array3<f64>,
    grad: &mut [f64],
) -> Array3<f64> {
    let n = (dy.shape()[1] * dy.shape()[2]) as f64;
    let mut dx = Array3::<f64>::zeros(dy.raw_dim());
    for (c, ((d, xh), mut o)) in dy
        .outer_iter()
        .zip(cache.xhat.outer_iter())
        .zip(dx.outer_iter_mut())
        .enumerate()
    {
        let sum_dy = d.sum();
        let sum_dy_xh = (&d * &xh).sum();
        grad[shape.gamma_offset + c] += sum_dy_xh;
        grad[shape.beta_offset + c] += sum_dy;
        let k = params[shape.gamma_offset + c] * cache.inv_std[c] / n;
        ndarray::Zip::from(&mut o)
            .and(&d)
            .and(&xh)
            .for_each(|o, &g, &v| *o = k * (n * g - sum_dy - v * sum_dy_xh));
    }
    dx
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` wherever the ReLU output was not positive.
pub fn relu_backward_inplace(out: &Array3<f64>, dy: &mut Array3<f64>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

/// 2×2 stride-2 max pooling (floor). Returns the output and the flat index
/// of each selected input element within its channel plane.
pub fn maxpool_forward(x: ArrayView3<f64>) -> (Array3<f64>, Vec<u32>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (2 * y, 2 * xx);
                let mut best_v = plane[best];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let p = (2 * y + dy, 2 * xx + dx);
                    if plane[p] > best_v {
                        best = p;
                        best_v = plane[p];
                    }
                }
                out[[ci, y, xx]] = best_v;
                arg.push((best.0 * w + best.1) as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(dy: ArrayView3<f64>, arg: &[u32], h: usize, w: usize) -> Array3<f64> {
    let (c, oh, ow) = dy.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = out.index_axis_mut(Axis(0), ci);
        let flat = plane.as_slice_mut().expect("contiguous");
        for (i, &g) in dy.index_axis(Axis(0), ci).iter().enumerate() {
            flat[arg[ci * oh * ow + i] as usize] += g;
        }
    }
    out
}

/// Bilinear resize of every channel.
pub fn upsample_forward(x: ArrayView3<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = x.shape()[0];
    let mut out = Array3::<f64>::zeros((c, h, w));
    for (mut o, p) in out.outer_iter_mut().zip(x.outer_iter()) {
        o.assign(&resample::bilinear(p, h, w));
    }
    out
}

pub fn upsample_backward(dy: ArrayView3<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = dy.shape()[0];
    let mut out = Array3::<f64>::zeros((c, h, w));
    for (mut o, p) in out.outer_iter_mut().zip(dy.outer_iter()) {
        o.assign(&resample::bilinear_adjoint(p, h, w));
    }
    out
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a, b]).expect("matching spatial dims")
}

/// Splits a concatenation gradient back into its two parts.
pub fn split(d: ArrayView3<f64>, ca: usize) -> (Array3<f64>, Array3<f64>) {
    (
        d.slice(s![..ca, .., ..]).to_owned(),
        d.slice(s![ca.., .., ..]).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_conv(shape: &ConvShape, params: &[f64], x: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let k = shape.kernel as isize;
        let pad = k / 2;
        Array3::from_shape_fn((shape.cout, h, w), |(o, y, xx)| {
            let mut acc = params[shape.bias_offset + o];
            for ci in 0..shape.cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky - pad;
                        let sx = xx as isize + kx - pad;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let wi = ((o * shape.cin + ci) * shape.kernel + ky as usize) * shape.kernel + kx as usize;
                        acc += params[shape.weight_offset + wi] * x[[ci, sy as usize, sx as usize]];
                    }
                }
            }
            acc
        })
    }

    fn sample_params(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) / 10.0).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let shape = ConvShape {
            cin: 2,
            cout: 3,
            kernel: 3,
            weight_offset: 0,
            bias_offset: 54,
        };
        let params = sample_params(shape.param_len());
        let x = Array3::from_shape_fn((2, 4, 5), |(c, y, x)| (c * 20 + y * 5 + x) as f64 * 0.1 - 1.0);
        let (y, _) = conv_forward(&shape, &params, x.view());
        let expect = brute_conv(&shape, &params, &x);
        assert!((&y - &expect).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let shape = ConvShape {
            cin: 2,
            cout: 2,
            kernel: 3,
            weight_offset: 0,
            bias_offset: 36,
        };
        let params = sample_params(shape.param_len());
        let x = Array3::from_shape_fn((2, 3, 4), |(c, y, x)| ((c * 7 + y * 3 + x) % 5) as f64 * 0.3 - 0.6);
        let dy = Array3::from_shape_fn((2, 3, 4), |(c, y, x)| ((c + 2 * y + 3 * x) % 4) as f64 - 1.5);
        let loss = |p: &[f64], x: &Array3<f64>| (&conv_forward(&shape, p, x.view()).0 * &dy).sum();

        let (_, input) = conv_forward(&shape, &params, x.view());
        let mut grad = vec![0.0; params.len()];
        let dx = conv_backward(&shape, &params, &input, dy.view(), &mut grad, true).unwrap();

        let h = 1e-6;
        for i in 0..params.len() {
            let mut p1 = params.clone();
            p1[i] += h;
            let mut p0 = params.clone();
            p0[i] -= h;
            let fd = (loss(&p1, &x) - loss(&p0, &x)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grad[i]);
        }
        for idx in [(0, 0, 0), (1, 2, 3), (0, 1, 2)] {
            let mut x1 = x.clone();
            x1[idx] += h;
            let mut x0 = x.clone();
            x0[idx] -= h;
            let fd = (loss(&params, &x1) - loss(&params, &x0)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let shape = NormShape {
            channels: 2,
            gamma_offset: 0,
            beta_offset: 2,
        };
        let params = vec![1.3, -0.7, 0.2, 0.5];
        let x = Array3::from_shape_fn((2, 3, 4), |(c, y, x)| ((c * 7 + y * 3 + x * x) % 5) as f64 * 0.3 - 0.6);
        let dy = Array3::from_shape_fn((2, 3, 4), |(c, y, x)| ((c + 2 * y + 3 * x) % 4) as f64 - 1.5);
        let loss = |p: &[f64], x: &Array3<f64>| (&instance_norm_forward(&shape, p, x).0 * &dy).sum();

        let (y, cache) = instance_norm_forward(&shape, &params, &x);
        for (c, plane) in cache.xhat.outer_iter().enumerate() {
            assert!(plane.mean().unwrap().abs() < 1e-12, "channel {c}");
        }
        assert!((y[[0, 0, 0]] - (1.3 * cache.xhat[[0, 0, 0]] + 0.2)).abs() < 1e-15);
        let mut grad = vec![0.0; 4];
        let dx = instance_norm_backward(&shape, &params, &cache, &dy, &mut grad);

        let h = 1e-6;
        for i in 0..params.len() {
            let mut p1 = params.clone();
            p1[i] += h;
            let mut p0 = params.clone();
            p0[i] -= h;
            let fd = (loss(&p1, &x) - loss(&p0, &x)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grad[i]);
        }
        for idx in [(0, 0, 0), (1, 2, 3), (0, 1, 2), (1, 0, 1)] {
            let mut x1 = x.clone();
            x1[idx] += h;
            let mut x0 = x.clone();
            x0[idx] -= h;
            let fd = (loss(&params, &x1) - loss(&params, &x0)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "{idx:?}: {fd} vs {}", dx[idx]);
        }
    }

    #[test]
    fn maxpool_round_trip_routes_gradient() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| ((y * 4 + x) * 7 % 16) as f64);
        let (out, arg) = maxpool_forward(x.view());
        assert_eq!(out.dim(), (1, 2, 2));
        let dx = maxpool_backward(Array3::ones((1, 2, 2)).view(), &arg, 4, 4);
        assert_eq!(dx.sum(), 4.0);
        for (&o, &a) in out.iter().zip(&arg) {
            assert_eq!(x.as_slice().unwrap()[a as usize], o);
        }
    }
}
