//! Spectral coarse-graining, Gaussian filtering and subgrid forcing.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{half_len, signed_index};
use crate::qg::{Layers, QgModel, SpectralState, Wavenumbers};

/// Coarse-graining geometry: factor, grid sizes and coarse grid spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarsenSpec {
    pub factor: usize,
    pub nx_hi: usize,
    pub nx_lo: usize,
    /// Coarse grid spacing (m).
    pub dx_lo: f64,
    /// Gaussian filter width (m); twice the coarse spacing by default, 0 disables filtering.
    pub filter_width: f64,
}

impl CoarsenSpec {
    pub fn new(nx_hi: usize, factor: usize, domain: f64) -> Result<Self> {
        if factor == 0 || !nx_hi.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "coarsening factor {factor} must divide grid size {nx_hi}"
            )));
        }
        let nx_lo = nx_hi / factor;
        if !nx_lo.is_multiple_of(2) {
            return Err(Error::Config(format!("coarse grid size {nx_lo} must be even")));
        }
        let dx_lo = domain / nx_lo as f64;
        Ok(CoarsenSpec {
            factor,
            nx_hi,
            nx_lo,
            dx_lo,
            filter_width: 2.0 * dx_lo,
        })
    }

    pub fn without_filter(mut self) -> Self {
        self.filter_width = 0.0;
        self
    }

    pub fn domain(&self) -> f64 {
        self.dx_lo * self.nx_lo as f64
    }
}

/// Gain `exp(-kappa^2 (2 dx)^2 / 24)` of the Gaussian filter with width twice `dx_lo`.
pub fn gaussian_gain(kappa: f64, dx_lo: f64) -> f64 {
    gaussian_gain_width(kappa, 2.0 * dx_lo)
}

fn gaussian_gain_width(kappa: f64, width: f64) -> f64 {
    (-kappa * kappa * width * width / 24.0).exp()
}

/// Multiplies every half-spectrum coefficient of an `n x n` field by the Gaussian gain.
pub fn gaussian_filter(field_hat: &[Complex64], n: usize, domain: f64, dx_lo: f64) -> Vec<Complex64> {
    apply_gaussian(field_hat, &Wavenumbers::new(n, domain), 2.0 * dx_lo)
}

fn apply_gaussian(field_hat: &[Complex64], wn: &Wavenumbers, width: f64) -> Vec<Complex64> {
    field_hat
        .iter()
        .zip(&wn.kappa2)
        .map(|(c, k2)| c * gaussian_gain_width(k2.sqrt(), width))
        .collect()
}

/// Keeps the lowest `1/K` of modes per dimension, rescaled so constants are preserved.
/// The coarse Nyquist row and column are dropped; `K = 1` is the identity.
pub fn coarse_grain(field_hat: &[Complex64], spec: &CoarsenSpec) -> Result<Vec<Complex64>> {
    let (n_hi, n_lo) = (spec.nx_hi, spec.nx_lo);
    let (h_hi, h_lo) = (half_len(n_hi), half_len(n_lo));
    if field_hat.len() != n_hi * h_hi {
        return Err(Error::shape(n_hi * h_hi, field_hat.len()));
    }
    if spec.factor == 1 {
        return Ok(field_hat.to_vec());
    }
    let scale = ((n_lo * n_lo) as f64) / ((n_hi * n_hi) as f64);
    let mut out = vec![Complex64::default(); n_lo * h_lo];
    for j in 0..n_lo {
        let l = signed_index(j, n_lo);
        if l.unsigned_abs() as usize >= n_lo / 2 {
            continue;
        }
        let j_hi = l.rem_euclid(n_hi as i64) as usize;
        for i in 0..n_lo / 2 {
            out[j * h_lo + i] = field_hat[j_hi * h_hi + i] * scale;
        }
    }
    Ok(out)
}

/// Precomputed coarsen-then-filter operator.
#[derive(Debug, Clone)]
pub struct Coarsener {
    spec: CoarsenSpec,
    lo_wavenumbers: Wavenumbers,
}

impl Coarsener {
    pub fn new(spec: CoarsenSpec) -> Self {
        let lo_wavenumbers = Wavenumbers::new(spec.nx_lo, spec.domain());
        Coarsener {
            spec,
            lo_wavenumbers,
        }
    }

    pub fn spec(&self) -> &CoarsenSpec {
        &self.spec
    }

    pub fn apply(&self, field_hat: &[Complex64]) -> Result<Vec<Complex64>> {
        let coarse = coarse_grain(field_hat, &self.spec)?;
        if self.spec.filter_width == 0.0 {
            return Ok(coarse);
        }
        Ok(apply_gaussian(&coarse, &self.lo_wavenumbers, self.spec.filter_width))
    }

    pub fn apply_state(&self, state: &SpectralState) -> Result<SpectralState> {
        Ok(SpectralState {
            n: self.spec.nx_lo,
            q_hat: [self.apply(&state.q_hat[0])?, self.apply(&state.q_hat[1])?],
            time: state.time,
            step_index: state.step_index,
        })
    }
}

/// Coarse-grains then Gaussian-filters a high-resolution half spectrum.
pub fn filter_and_coarsen(field_hat: &[Complex64], spec: &CoarsenSpec) -> Result<Vec<Complex64>> {
    Coarsener::new(spec.clone()).apply(field_hat)
}

/// Subgrid PV forcing on the coarse grid, as half spectra:
/// the filtered high-resolution one-step tendency minus the low-resolution
/// one-step tendency of the filtered state.
pub fn subgrid_forcing_hat(
    q_hi: &SpectralState,
    model_hi: &QgModel,
    model_lo: &QgModel,
    coarsener: &Coarsener,
) -> Result<Layers<Vec<Complex64>>> {
    check_pair(model_hi, model_lo, coarsener)?;
    let t_hi = model_hi.one_step_tendency(q_hi)?;
    let q_lo = coarsener.apply_state(q_hi)?;
    let t_lo = model_lo.one_step_tendency(&q_lo)?;
    let mut out = [coarsener.apply(&t_hi[0])?, coarsener.apply(&t_hi[1])?];
    for m in 0..2 {
        for (o, t) in out[m].iter_mut().zip(&t_lo[m]) {
            *o -= t;
        }
    }
    Ok(out)
}

/// Subgrid forcing `(Pi_q1, Pi_q2)` in physical space on the coarse grid (1/s^2).
pub fn subgrid_forcing(
    q_hi: &SpectralState,
    model_hi: &QgModel,
    model_lo: &QgModel,
    coarsener: &Coarsener,
) -> Result<Layers<Vec<f64>>> {
    let hat = subgrid_forcing_hat(q_hi, model_hi, model_lo, coarsener)?;
    let fft = model_lo.fft();
    Ok([fft.inverse_vec(&hat[0]), fft.inverse_vec(&hat[1])])
}

fn check_pair(model_hi: &QgModel, model_lo: &QgModel, coarsener: &Coarsener) -> Result<()> {
    let spec = coarsener.spec();
    if model_hi.n() != spec.nx_hi || model_lo.n() != spec.nx_lo {
        return Err(Error::shape(
            format!("{} -> {}", spec.nx_hi, spec.nx_lo),
            format!("{} -> {}", model_hi.n(), model_lo.n()),
        ));
    }
    let (a, b) = (model_hi.params(), model_lo.params());
    let same_physics = a.l == b.l
        && a.h1 == b.h1
        && a.h2 == b.h2
        && a.f0 == b.f0
        && a.beta == b.beta
        && a.g_prime == b.g_prime
        && a.r_ek == b.r_ek
        && a.u1 == b.u1
        && a.u2 == b.u2
        && a.dt == b.dt;
    if !same_physics {
        return Err(Error::Config(
            "high- and low-resolution models must differ only in resolution".into(),
        ));
    }
    Ok(())
}

/// Filtered, coarse-grained velocities `(u1, v1, u2, v2)` of a high-resolution state.
pub fn coarse_velocities(
    q_hi: &SpectralState,
    model_hi: &QgModel,
    model_lo: &QgModel,
    coarsener: &Coarsener,
) -> Result<[Vec<f64>; 4]> {
    let psi = model_hi.invert_pv(&q_hi.q_hat);
    let wn = model_hi.wavenumbers();
    let n = model_hi.n();
    let h = half_len(n);
    let lo_fft = model_lo.fft();
    let mut out: [Vec<f64>; 4] = Default::default();
    for m in 0..2 {
        let mut u_hat = vec![Complex64::default(); psi[m].len()];
        let mut v_hat = vec![Complex64::default(); psi[m].len()];
        for j in 0..n {
            for i in 0..h {
                let idx = j * h + i;
                u_hat[idx] = -Complex64::i() * wn.l_diff[j] * psi[m][idx];
                v_hat[idx] = Complex64::i() * wn.k_diff[i] * psi[m][idx];
            }
        }
        out[2 * m] = lo_fft.inverse_vec(&coarsener.apply(&u_hat)?);
        out[2 * m + 1] = lo_fft.inverse_vec(&coarsener.apply(&v_hat)?);
    }
    Ok(out)
}
