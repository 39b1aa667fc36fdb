//! Pseudo-spectral two-layer QG dynamics on a doubly periodic square.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;

use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::fft::{half_len, signed_index, Fft2};

pub type Layers<T> = [T; 2];

/// Cut-off of the scale-selective filter in nondimensional wavenumber units.
pub const SSD_CUTOFF: f64 = 0.65 * PI;
/// Exponential decay coefficient of the scale-selective filter.
pub const SSD_STRENGTH: f64 = 23.6;

/// Gain of the scale-selective dissipation filter at `kappa_star = kappa * dx`.
pub fn ssd_gain(kappa_star: f64) -> Result<f64> {
    if !(kappa_star >= 0.0) {
        return Err(Error::Argument(format!(
            "nondimensional wavenumber must be >= 0, got {kappa_star}"
        )));
    }
    Ok(if kappa_star < SSD_CUTOFF {
        1.0
    } else {
        (-SSD_STRENGTH * (kappa_star - SSD_CUTOFF).powi(4)).exp()
    })
}

/// PV coefficients of both layers on the half-spectrum grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub n: usize,
    pub q_hat: Layers<Vec<Complex64>>,
    /// Model time (s).
    pub time: f64,
    pub step_index: u64,
}

impl SpectralState {
    pub fn zeros(n: usize) -> Self {
        let len = n * half_len(n);
        SpectralState {
            n,
            q_hat: [vec![Complex64::default(); len], vec![Complex64::default(); len]],
            time: 0.0,
            step_index: 0,
        }
    }

    pub fn from_physical(fft: &Fft2, q: &Layers<Vec<f64>>) -> Self {
        SpectralState {
            n: fft.n(),
            q_hat: [fft.forward_vec(&q[0]), fft.forward_vec(&q[1])],
            time: 0.0,
            step_index: 0,
        }
    }

    pub fn to_physical(&self, fft: &Fft2) -> Layers<Vec<f64>> {
        [fft.inverse_vec(&self.q_hat[0]), fft.inverse_vec(&self.q_hat[1])]
    }

    pub fn is_finite(&self) -> bool {
        self.q_hat
            .iter()
            .flatten()
            .all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Streamfunction and physical-space velocities of both layers.
#[derive(Debug, Clone)]
pub struct DiagnosticFields {
    pub psi_hat: Layers<Vec<Complex64>>,
    pub u: Layers<Vec<f64>>,
    pub v: Layers<Vec<f64>>,
}

/// Dimensional wavenumbers of a half-spectrum grid.
#[derive(Debug, Clone)]
pub struct Wavenumbers {
    pub n: usize,
    /// Zonal wavenumbers, `n/2 + 1` entries (rad/m).
    pub k: Vec<f64>,
    /// Meridional wavenumbers in FFT order, `n` entries (rad/m).
    pub l: Vec<f64>,
    /// Zonal wavenumbers for differentiation (Nyquist zeroed).
    pub k_diff: Vec<f64>,
    /// Meridional wavenumbers for differentiation (Nyquist zeroed).
    pub l_diff: Vec<f64>,
    /// `k^2 + l^2` per half-spectrum coefficient, row-major `[l][k]`.
    pub kappa2: Vec<f64>,
}

impl Wavenumbers {
    pub fn new(n: usize, domain: f64) -> Self {
        let h = half_len(n);
        let dk = 2.0 * PI / domain;
        let k: Vec<f64> = (0..h).map(|i| dk * i as f64).collect();
        let l: Vec<f64> = (0..n).map(|j| dk * signed_index(j, n) as f64).collect();
        let mut k_diff = k.clone();
        k_diff[n / 2] = 0.0;
        let mut l_diff = l.clone();
        l_diff[n / 2] = 0.0;
        let mut kappa2 = vec![0.0; n * h];
        for j in 0..n {
            for i in 0..h {
                kappa2[j * h + i] = k[i] * k[i] + l[j] * l[j];
            }
        }
        Wavenumbers {
            n,
            k,
            l,
            k_diff,
            l_diff,
            kappa2,
        }
    }

    pub fn half_len(&self) -> usize {
        half_len(self.n)
    }
}

struct Work {
    psi: Layers<Vec<Complex64>>,
    spec: Vec<Complex64>,
    u: Vec<f64>,
    v: Vec<f64>,
    q: Vec<f64>,
    flux: Vec<f64>,
    flux_hat: Vec<Complex64>,
}

/// A configured solver: wavenumber tables, inversion coefficients, filter.
pub struct QgModel {
    params: ModelParams,
    n: usize,
    fft: Fft2,
    wn: Wavenumbers,
    filter: Vec<f64>,
    /// Inverse of `(M - kappa^2 I)` per coefficient: `[a11, a12, a21, a22]`.
    inverse: Vec<[f64; 4]>,
    stretch: Layers<f64>,
    beta_m: Layers<f64>,
    nonlinear: bool,
    work: RefCell<Work>,
}

impl std::fmt::Debug for QgModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QgModel")
            .field("params", &self.params)
            .field("nonlinear", &self.nonlinear)
            .finish()
    }
}

impl QgModel {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        let n = params.nx;
        let h = half_len(n);
        let wn = Wavenumbers::new(n, params.l);
        let dx = params.dx();
        let stretch = [params.stretching(0), params.stretching(1)];
        let mut filter = vec![1.0; n * h];
        let mut inverse = vec![[0.0; 4]; n * h];
        for j in 0..n {
            for i in 0..h {
                let idx = j * h + i;
                let k2 = wn.kappa2[idx];
                filter[idx] = ssd_gain(k2.sqrt() * dx)?;
                if k2 == 0.0 {
                    continue;
                }
                let (f1, f2) = (stretch[0], stretch[1]);
                let det = k2 * (k2 + f1 + f2);
                if !det.is_normal() {
                    return Err(Error::SingularInversion { i, j });
                }
                inverse[idx] = [-(f2 + k2) / det, -f1 / det, -f2 / det, -(f1 + k2) / det];
            }
        }
        let len = n * h;
        let work = Work {
            psi: [vec![Complex64::default(); len], vec![Complex64::default(); len]],
            spec: vec![Complex64::default(); len],
            u: vec![0.0; n * n],
            v: vec![0.0; n * n],
            q: vec![0.0; n * n],
            flux: vec![0.0; n * n],
            flux_hat: vec![Complex64::default(); len],
        };
        Ok(QgModel {
            params: params.clone(),
            n,
            fft: Fft2::new(n),
            wn,
            filter,
            inverse,
            stretch,
            beta_m: [params.beta_m(0), params.beta_m(1)],
            nonlinear: true,
            work: RefCell::new(work),
        })
    }

    /// Disables the advective Jacobian, leaving only the linear terms.
    pub fn linear_only(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub fn wavenumbers(&self) -> &Wavenumbers {
        &self.wn
    }

    /// Scale-selective filter gain per half-spectrum coefficient.
    pub fn filter(&self) -> &[f64] {
        &self.filter
    }

    fn check_state(&self, state: &SpectralState) -> Result<()> {
        let len = self.n * half_len(self.n);
        if state.n != self.n || state.q_hat.iter().any(|q| q.len() != len) {
            return Err(Error::shape(
                format!("{0}x{0} state", self.n),
                format!("{0}x{0} state", state.n),
            ));
        }
        Ok(())
    }

    /// Solves `(M - kappa^2 I) psi = q` per wavenumber; the mean mode of psi is zero.
    pub fn invert_pv(&self, q_hat: &Layers<Vec<Complex64>>) -> Layers<Vec<Complex64>> {
        let len = self.inverse.len();
        let mut psi = [vec![Complex64::default(); len], vec![Complex64::default(); len]];
        self.invert_into(q_hat, &mut psi);
        psi
    }

    fn invert_into(&self, q_hat: &Layers<Vec<Complex64>>, psi: &mut Layers<Vec<Complex64>>) {
        let [p1, p2] = psi;
        for (idx, a) in self.inverse.iter().enumerate() {
            let (q1, q2) = (q_hat[0][idx], q_hat[1][idx]);
            p1[idx] = q1 * a[0] + q2 * a[1];
            p2[idx] = q1 * a[2] + q2 * a[3];
        }
    }

    /// Applies `(M - kappa^2 I)` to a streamfunction, giving PV.
    pub fn pv_from_streamfunction(&self, psi: &Layers<Vec<Complex64>>) -> Layers<Vec<Complex64>> {
        let (f1, f2) = (self.stretch[0], self.stretch[1]);
        let len = psi[0].len();
        let mut q = [vec![Complex64::default(); len], vec![Complex64::default(); len]];
        for idx in 0..len {
            let k2 = self.wn.kappa2[idx];
            let (p1, p2) = (psi[0][idx], psi[1][idx]);
            q[0][idx] = p1 * (-f1 - k2) + p2 * f1;
            q[1][idx] = p1 * f2 + p2 * (-f2 - k2);
        }
        q
    }

    /// `u = -d(psi)/dy`, `v = d(psi)/dx` evaluated spectrally.
    pub fn compute_velocities(&self, psi_hat: &Layers<Vec<Complex64>>) -> DiagnosticFields {
        let n = self.n;
        let mut u = [vec![0.0; n * n], vec![0.0; n * n]];
        let mut v = [vec![0.0; n * n], vec![0.0; n * n]];
        let mut spec = vec![Complex64::default(); psi_hat[0].len()];
        for m in 0..2 {
            self.derivative_y(&psi_hat[m], &mut spec, -1.0);
            self.fft.inverse(&spec, &mut u[m]);
            self.derivative_x(&psi_hat[m], &mut spec, 1.0);
            self.fft.inverse(&spec, &mut v[m]);
        }
        DiagnosticFields {
            psi_hat: psi_hat.clone(),
            u,
            v,
        }
    }

    /// Diagnostics for a state.
    pub fn diagnostics(&self, state: &SpectralState) -> DiagnosticFields {
        self.compute_velocities(&self.invert_pv(&state.q_hat))
    }

    fn derivative_x(&self, src: &[Complex64], dst: &mut [Complex64], scale: f64) {
        let h = half_len(self.n);
        for (row_s, row_d) in src.chunks_exact(h).zip(dst.chunks_exact_mut(h)) {
            for i in 0..h {
                let c = row_s[i];
                let kk = scale * self.wn.k_diff[i];
                row_d[i] = Complex64::new(-kk * c.im, kk * c.re);
            }
        }
    }

    fn derivative_y(&self, src: &[Complex64], dst: &mut [Complex64], scale: f64) {
        let h = half_len(self.n);
        for (j, (row_s, row_d)) in src.chunks_exact(h).zip(dst.chunks_exact_mut(h)).enumerate() {
            let ll = scale * self.wn.l_diff[j];
            for i in 0..h {
                let c = row_s[i];
                row_d[i] = Complex64::new(-ll * c.im, ll * c.re);
            }
        }
    }

    /// Pseudo-spectral advective Jacobian `J(psi, q)` in flux form, for one layer.
    pub fn jacobian(&self, psi_hat: &[Complex64], q_hat: &[Complex64]) -> Result<Vec<Complex64>> {
        let mut out = vec![Complex64::default(); q_hat.len()];
        let mut w = self.work.borrow_mut();
        self.jacobian_into(&mut w, psi_hat, q_hat, &mut out, 0)?;
        Ok(out)
    }

    fn jacobian_into(
        &self,
        w: &mut Work,
        psi_hat: &[Complex64],
        q_hat: &[Complex64],
        out: &mut [Complex64],
        step: u64,
    ) -> Result<()> {
        let Work {
            spec,
            u,
            v,
            q,
            flux,
            flux_hat,
            ..
        } = w;
        self.derivative_y(psi_hat, spec, -1.0);
        self.fft.inverse(spec, u);
        self.derivative_x(psi_hat, spec, 1.0);
        self.fft.inverse(spec, v);
        self.fft.inverse(q_hat, q);
        let finite = u
            .iter()
            .chain(v.iter())
            .chain(q.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Diverged { step });
        }
        // d(uq)/dx
        for ((f, a), b) in flux.iter_mut().zip(u.iter()).zip(q.iter()) {
            *f = a * b;
        }
        self.fft.forward(flux, flux_hat);
        self.derivative_x(flux_hat, out, 1.0);
        // + d(vq)/dy
        for ((f, a), b) in flux.iter_mut().zip(v.iter()).zip(q.iter()) {
            *f = a * b;
        }
        self.fft.forward(flux, flux_hat);
        self.derivative_y(flux_hat, spec, 1.0);
        for (o, s) in out.iter_mut().zip(spec.iter()) {
            *o += s;
        }
        Ok(())
    }

    /// Right-hand side of the prognostic equations, excluding the scale-selective filter.
    pub fn tendency(&self, state: &SpectralState) -> Result<Layers<Vec<Complex64>>> {
        self.check_state(state)?;
        let len = state.q_hat[0].len();
        let mut out = [vec![Complex64::default(); len], vec![Complex64::default(); len]];
        let mut w = self.work.borrow_mut();
        let mut psi = std::mem::take(&mut w.psi);
        self.invert_into(&state.q_hat, &mut psi);
        let h = half_len(self.n);
        for m in 0..2 {
            if self.nonlinear {
                self.jacobian_into(&mut w, &psi[m], &state.q_hat[m], &mut out[m], state.step_index)?;
                for o in out[m].iter_mut() {
                    *o = -*o;
                }
            } else if !state.q_hat[m].iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
                return Err(Error::Diverged {
                    step: state.step_index,
                });
            }
            let beta = self.beta_m[m];
            let um = self.params.mean_velocity(m);
            let drag = if m == 1 { self.params.r_ek } else { 0.0 };
            let (p, q, o) = (&psi[m], &state.q_hat[m], &mut out[m]);
            for j in 0..self.n {
                for i in 0..h {
                    let idx = j * h + i;
                    let ik = Complex64::new(0.0, self.wn.k_diff[i]);
                    o[idx] += -ik * (p[idx] * beta + q[idx] * um)
                        + p[idx] * (drag * self.wn.kappa2[idx]);
                }
            }
        }
        w.psi = psi;
        Ok(out)
    }

    /// Tendency of a single fresh forward-Euler step including the filter stage:
    /// `(F * (q + dt R(q)) - q) / dt`.
    pub fn one_step_tendency(&self, state: &SpectralState) -> Result<Layers<Vec<Complex64>>> {
        let mut r = self.tendency(state)?;
        let dt = self.params.dt;
        for m in 0..2 {
            for ((t, q), f) in r[m].iter_mut().zip(&state.q_hat[m]).zip(&self.filter) {
                *t = ((*q + *t * dt) * *f - *q) / dt;
            }
        }
        Ok(r)
    }

    /// Advances one timestep with Adams-Bashforth 3 (Euler, then AB2 at startup)
    /// followed by the scale-selective filter.
    pub fn step(&self, state: &mut SpectralState, history: &mut AbHistory) -> Result<()> {
        self.step_with_forcing(state, history, None)
    }

    /// As [`QgModel::step`] with an extra spectral tendency added to the right-hand side.
    pub fn step_with_forcing(
        &self,
        state: &mut SpectralState,
        history: &mut AbHistory,
        extra: Option<&Layers<Vec<Complex64>>>,
    ) -> Result<()> {
        let mut r = self.tendency(state)?;
        if let Some(extra) = extra {
            for m in 0..2 {
                if extra[m].len() != r[m].len() {
                    return Err(Error::shape(r[m].len(), extra[m].len()));
                }
                for (t, e) in r[m].iter_mut().zip(&extra[m]) {
                    *t += e;
                }
            }
        }
        let dt = self.params.dt;
        for m in 0..2 {
            let q = &mut state.q_hat[m];
            match (&history.prev, &history.prev2) {
                (Some(p1), Some(p2)) => {
                    let (c0, c1, c2) = (23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0);
                    for idx in 0..q.len() {
                        q[idx] += (r[m][idx] * c0 + p1[m][idx] * c1 + p2[m][idx] * c2) * dt;
                    }
                }
                (Some(p1), None) => {
                    for idx in 0..q.len() {
                        q[idx] += (r[m][idx] * 1.5 - p1[m][idx] * 0.5) * dt;
                    }
                }
                _ => {
                    for idx in 0..q.len() {
                        q[idx] += r[m][idx] * dt;
                    }
                }
            }
            for (c, f) in q.iter_mut().zip(&self.filter) {
                *c *= *f;
            }
        }
        history.push(r);
        state.time += dt;
        state.step_index += 1;
        if !state.is_finite() {
            return Err(Error::Diverged {
                step: state.step_index,
            });
        }
        Ok(())
    }
}

/// Previous right-hand sides for the multistep integrator.
#[derive(Debug, Clone, Default)]
pub struct AbHistory {
    pub prev: Option<Layers<Vec<Complex64>>>,
    pub prev2: Option<Layers<Vec<Complex64>>>,
}

impl AbHistory {
    pub fn push(&mut self, r: Layers<Vec<Complex64>>) {
        self.prev2 = self.prev.take();
        self.prev = Some(r);
    }

    /// Number of stored tendencies (0, 1 or 2).
    pub fn depth(&self) -> usize {
        self.prev.is_some() as usize + self.prev2.is_some() as usize
    }
}
