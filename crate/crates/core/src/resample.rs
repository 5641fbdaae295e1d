//! Bilinear and nearest-neighbour resampling of single 2-D planes.
//!
//! Bilinear sampling uses the align-corners convention: output index `i`
//! samples source coordinate `i * (in - 1) / (out - 1)`, so corner pixels map
//! onto corner pixels and constant planes stay constant.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    (0..output)
        .map(|i| {
            if output == 1 || input == 1 {
                return Tap {
                    lo: 0,
                    hi: 0,
                    frac: 0.0,
                };
            }
            let pos = i as f64 * (input - 1) as f64 / (output - 1) as f64;
            let lo = (pos.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resample of `src` to `h × w`. Returns a copy when sizes match.
pub fn bilinear(src: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (h, w) {
        return src.to_owned();
    }
    let ty = axis_taps(sh, h);
    let tx = axis_taps(sw, w);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (a, b) = (ty[y], tx[x]);
        let top = src[[a.lo, b.lo]] * (1.0 - b.frac) + src[[a.lo, b.hi]] * b.frac;
        let bot = src[[a.hi, b.lo]] * (1.0 - b.frac) + src[[a.hi, b.hi]] * b.frac;
        top * (1.0 - a.frac) + bot * a.frac
    })
}

/// Adjoint of [`bilinear`]: maps a gradient on the `h × w` output back onto
/// the `src_h × src_w` input.
pub fn bilinear_adjoint(grad: ArrayView2<f64>, src_h: usize, src_w: usize) -> Array2<f64> {
    let (h, w) = grad.dim();
    if (h, w) == (src_h, src_w) {
        return grad.to_owned();
    }
    let ty = axis_taps(src_h, h);
    let tx = axis_taps(src_w, w);
    let mut out = Array2::<f64>::zeros((src_h, src_w));
    for y in 0..h {
        let a = ty[y];
        for x in 0..w {
            let b = tx[x];
            let g = grad[[y, x]];
            out[[a.lo, b.lo]] += g * (1.0 - a.frac) * (1.0 - b.frac);
            out[[a.lo, b.hi]] += g * (1.0 - a.frac) * b.frac;
            out[[a.hi, b.lo]] += g * a.frac * (1.0 - b.frac);
            out[[a.hi, b.hi]] += g * a.frac * b.frac;
        }
    }
    out
}

/// Nearest-neighbour resample using pixel-centre alignment.
pub fn nearest<T: Copy + Default>(src: ArrayView2<T>, h: usize, w: usize) -> Array2<T> {
    let (sh, sw) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((2 * y + 1) * sh / (2 * h)).min(sh - 1);
        let sx = ((2 * x + 1) * sw / (2 * w)).min(sw - 1);
        src[[sy, sx]]
    })
}
