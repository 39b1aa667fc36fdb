//! Two-dimensional real FFTs on square periodic grids.
//!
//! Physical fields are stored row-major as `[y][x]`, `n * n` values.
//! Half spectra are stored row-major as `[l][k]` with `n` meridional rows
//! (`l` in FFT order) and `n / 2 + 1` non-negative zonal wavenumbers.
//! The forward transform is unnormalized; the inverse carries `1 / n^2`.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

/// Number of stored zonal wavenumbers in a half spectrum.
#[inline]
pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

/// Signed FFT-order index: `0, 1, .., n/2 - 1, -n/2, .., -1`.
#[inline]
pub fn signed_index(j: usize, n: usize) -> i64 {
    if j < n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

struct Scratch {
    row: Vec<f64>,
    cplx: Vec<Complex64>,
    transposed: Vec<Complex64>,
    real_scratch: Vec<Complex64>,
    col_scratch: Vec<Complex64>,
}

/// Planned forward/inverse 2-D real transforms for one grid size.
pub struct Fft2 {
    n: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scratch: RefCell<Scratch>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2").field("n", &self.n).finish()
    }
}

impl Clone for Fft2 {
    fn clone(&self) -> Self {
        Fft2::new(self.n)
    }
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2 && n.is_multiple_of(2), "grid size must be even, got {n}");
        let mut rp = RealFftPlanner::<f64>::new();
        let r2c = rp.plan_fft_forward(n);
        let c2r = rp.plan_fft_inverse(n);
        let mut cp = FftPlanner::<f64>::new();
        let col_fwd = cp.plan_fft_forward(n);
        let col_inv = cp.plan_fft_inverse(n);
        let h = half_len(n);
        let real_scratch_len = r2c
            .get_scratch_len()
            .max(c2r.get_scratch_len());
        let col_scratch_len = col_fwd
            .get_inplace_scratch_len()
            .max(col_inv.get_inplace_scratch_len());
        let scratch = Scratch {
            row: vec![0.0; n],
            cplx: vec![Complex64::default(); h],
            transposed: vec![Complex64::default(); n * h],
            real_scratch: vec![Complex64::default(); real_scratch_len],
            col_scratch: vec![Complex64::default(); col_scratch_len],
        };
        Fft2 {
            n,
            r2c,
            c2r,
            col_fwd,
            col_inv,
            scratch: RefCell::new(scratch),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_len(&self) -> usize {
        half_len(self.n)
    }

    /// Number of coefficients in a half spectrum.
    pub fn spectral_len(&self) -> usize {
        self.n * half_len(self.n)
    }

    /// Forward real-to-half-spectrum transform.
    pub fn forward(&self, field: &[f64], out: &mut [Complex64]) {
        let n = self.n;
        let h = half_len(n);
        assert_eq!(field.len(), n * n);
        assert_eq!(out.len(), n * h);
        let mut s = self.scratch.borrow_mut();
        let Scratch {
            row,
            transposed,
            real_scratch,
            col_scratch,
            ..
        } = &mut *s;
        for j in 0..n {
            row.copy_from_slice(&field[j * n..(j + 1) * n]);
            self.r2c
                .process_with_scratch(row, &mut out[j * h..(j + 1) * h], real_scratch)
                .expect("r2c lengths are fixed at planning time");
        }
        transpose(out, transposed, n, h);
        self.col_fwd.process_with_scratch(transposed, col_scratch);
        transpose(transposed, out, h, n);
    }

    /// Inverse half-spectrum-to-real transform, normalized by `1 / n^2`.
    ///
    /// The input is left untouched; any non-Hermitian part in the `k = 0`
    /// and Nyquist columns is projected away.
    pub fn inverse(&self, spec: &[Complex64], out: &mut [f64]) {
        let n = self.n;
        let h = half_len(n);
        assert_eq!(spec.len(), n * h);
        assert_eq!(out.len(), n * n);
        let mut s = self.scratch.borrow_mut();
        let Scratch {
            cplx,
            transposed,
            real_scratch,
            col_scratch,
            ..
        } = &mut *s;
        transpose(spec, transposed, n, h);
        self.col_inv.process_with_scratch(transposed, col_scratch);
        let norm = 1.0 / (n * n) as f64;
        for j in 0..n {
            for i in 0..h {
                cplx[i] = transposed[i * n + j];
            }
            cplx[0].im = 0.0;
            cplx[h - 1].im = 0.0;
            let dst = &mut out[j * n..(j + 1) * n];
            self.c2r
                .process_with_scratch(cplx, dst, real_scratch)
                .expect("c2r lengths are fixed at planning time");
            for v in dst.iter_mut() {
                *v *= norm;
            }
        }
    }

    pub fn forward_vec(&self, field: &[f64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); self.spectral_len()];
        self.forward(field, &mut out);
        out
    }

    pub fn inverse_vec(&self, spec: &[Complex64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        self.inverse(spec, &mut out);
        out
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Expands a Hermitian half spectrum to the full `n x n` coefficient grid,
/// row-major `[l][k]` with both indices in FFT order.
pub fn expand_half(half: &[Complex64], n: usize) -> Vec<Complex64> {
    let h = half_len(n);
    assert_eq!(half.len(), n * h);
    let mut full = vec![Complex64::default(); n * n];
    for j in 0..n {
        for i in 0..n {
            full[j * n + i] = if i < h {
                half[j * h + i]
            } else {
                let jm = (n - j) % n;
                half[jm * h + (n - i)].conj()
            };
        }
    }
    full
}

/// Full complex 2-D DFT of a real `n x n` field (unnormalized).
pub fn fft2(field: &[f64], n: usize) -> Vec<Complex64> {
    let plan = Fft2::new(n);
    expand_half(&plan.forward_vec(field), n)
}

/// Inverse of [`fft2`] for a full spectrum; returns the complex field.
pub fn ifft2_full(spec: &[Complex64], n: usize) -> Vec<Complex64> {
    assert_eq!(spec.len(), n * n);
    let mut planner = FftPlanner::<f64>::new();
    let inv = planner.plan_fft_inverse(n);
    let mut buf = spec.to_vec();
    inv.process(&mut buf);
    let mut t = vec![Complex64::default(); n * n];
    transpose(&buf, &mut t, n, n);
    inv.process(&mut t);
    transpose(&t, &mut buf, n, n);
    let norm = 1.0 / (n * n) as f64;
    for v in &mut buf {
        *v *= norm;
    }
    buf
}
