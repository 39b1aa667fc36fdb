//! Periodic 5x5 convolution: the direct spatial form and the padded-kernel
//! spectral form used by the training engine.
//!
//! Weights act as a cross-correlation,
//! `h[o](y, x) = b[o] + sum_i sum_{a,b} w[o][i][a][b] * x_i(y + a - 2, x + b - 2)`,
//! with indices taken modulo the grid size. Equivalently `h = K * x` (circular
//! convolution) with the padded kernel `K` from [`pad_kernel`].

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::Fft2;

pub const KERNEL: usize = 5;
pub const KERNEL_TAPS: usize = KERNEL * KERNEL;
const HALF: usize = KERNEL / 2;

/// Grid index that tap `(a, b)` occupies in the padded kernel.
pub fn tap_position(a: usize, b: usize, n: usize) -> (usize, usize) {
    ((n + HALF - a) % n, (n + HALF - b) % n)
}

/// Zero-pads a 5x5 kernel to `n x n` so that circular convolution with the
/// result reproduces [`conv2d_periodic`].
pub fn pad_kernel(w: &[f64], n: usize) -> Result<Vec<f64>> {
    if w.len() != KERNEL_TAPS {
        return Err(Error::shape(KERNEL_TAPS, w.len()));
    }
    if n < KERNEL {
        return Err(Error::Argument(format!("grid {n} smaller than the kernel")));
    }
    let mut out = vec![0.0; n * n];
    for a in 0..KERNEL {
        for b in 0..KERNEL {
            let (y, x) = tap_position(a, b, n);
            out[y * n + x] = w[a * KERNEL + b];
        }
    }
    Ok(out)
}

/// Direct periodic convolution of `in_ch` fields with an `out_ch x in_ch x 5 x 5`
/// weight stack plus one bias per output channel.
pub fn conv2d_periodic(
    weights: &[f64],
    bias: &[f64],
    input: &[f64],
    in_ch: usize,
    out_ch: usize,
    n: usize,
) -> Result<Vec<f64>> {
    if weights.len() != out_ch * in_ch * KERNEL_TAPS {
        return Err(Error::shape(out_ch * in_ch * KERNEL_TAPS, weights.len()));
    }
    if bias.len() != out_ch {
        return Err(Error::shape(out_ch, bias.len()));
    }
    if input.len() != in_ch * n * n {
        return Err(Error::shape(in_ch * n * n, input.len()));
    }
    let np = n * n;
    let mut out = vec![0.0; out_ch * np];
    for o in 0..out_ch {
        let dst = &mut out[o * np..(o + 1) * np];
        dst.fill(bias[o]);
        for i in 0..in_ch {
            let src = &input[i * np..(i + 1) * np];
            let w = &weights[(o * in_ch + i) * KERNEL_TAPS..][..KERNEL_TAPS];
            for a in 0..KERNEL {
                for b in 0..KERNEL {
                    let wab = w[a * KERNEL + b];
                    if wab == 0.0 {
                        continue;
                    }
                    for y in 0..n {
                        let sy = (y + n + a - HALF) % n;
                        let row = &src[sy * n..(sy + 1) * n];
                        let drow = &mut dst[y * n..(y + 1) * n];
                        for x in 0..n {
                            drow[x] += wab * row[(x + n + b - HALF) % n];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Half spectrum of the padded kernel.
pub fn kernel_spectrum(fft: &Fft2, w: &[f64]) -> Result<Vec<Complex64>> {
    Ok(fft.forward_vec(&pad_kernel(w, fft.n())?))
}

/// Reads the 25 taps back out of a padded-kernel-shaped field.
pub(crate) fn extract_taps(field: &[f64], n: usize, out: &mut [f64]) {
    for a in 0..KERNEL {
        for b in 0..KERNEL {
            let (y, x) = tap_position(a, b, n);
            out[a * KERNEL + b] = field[y * n + x];
        }
    }
}

/// `acc += a * b` over complex slices.
#[inline]
pub(crate) fn mac(acc: &mut [Complex64], a: &[Complex64], b: &[Complex64]) {
    for ((o, x), y) in acc.iter_mut().zip(a).zip(b) {
        *o = Complex64::new(o.re + x.re * y.re - x.im * y.im, o.im + x.re * y.im + x.im * y.re);
    }
}

/// `acc += conj(a) * b` over complex slices.
#[inline]
pub(crate) fn mac_conj(acc: &mut [Complex64], a: &[Complex64], b: &[Complex64]) {
    for ((o, x), y) in acc.iter_mut().zip(a).zip(b) {
        *o = Complex64::new(o.re + x.re * y.re + x.im * y.im, o.im + x.re * y.im - x.im * y.re);
    }
}
