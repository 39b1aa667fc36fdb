use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{AbHistory, QgModel, SpectralState};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::fft::{half_len, signed_index};

/// A solver instance that owns its state and integrator history.
#[derive(Debug)]
pub struct Simulation {
    pub model: QgModel,
    pub state: SpectralState,
    pub history: AbHistory,
}

impl Simulation {
    pub fn new(params: &ModelParams, ic: SpectralState) -> Result<Self> {
        let model = QgModel::new(params)?;
        if ic.n != model.n() {
            return Err(Error::shape(model.n(), ic.n));
        }
        Ok(Simulation {
            model,
            state: ic,
            history: AbHistory::default(),
        })
    }

    pub fn step(&mut self) -> Result<()> {
        self.model.step(&mut self.state, &mut self.history)
    }

    pub fn advance(&mut self, n_steps: u64) -> Result<()> {
        for _ in 0..n_steps {
            self.step()?;
        }
        Ok(())
    }
}

/// Integrates `n_steps` and returns the initial state plus every
/// `snapshot_interval`-th state.
pub fn run_simulation(
    params: &ModelParams,
    ic: SpectralState,
    n_steps: u64,
    snapshot_interval: u64,
) -> Result<Vec<SpectralState>> {
    if snapshot_interval == 0 {
        return Err(Error::Argument("snapshot interval must be >= 1".into()));
    }
    let mut sim = Simulation::new(params, ic)?;
    let mut snaps = vec![sim.state.clone()];
    for s in 1..=n_steps {
        sim.step()?;
        if s % snapshot_interval == 0 {
            snaps.push(sim.state.clone());
        }
    }
    Ok(snaps)
}

/// Largest wavenumber index (radial, grid units) populated by the random initial condition.
pub fn ic_band_limit(n: usize) -> f64 {
    (n as f64 / 4.0).min(6.0)
}

/// Zero-mean random PV in both layers, band-limited to large scales,
/// scaled to an RMS of `amplitude` per layer.
pub fn random_initial_condition(seed: u64, params: &ModelParams, amplitude: f64) -> Result<SpectralState> {
    if !(amplitude > 0.0) {
        return Err(Error::Argument(format!("amplitude must be positive, got {amplitude}")));
    }
    let model = QgModel::new(params)?;
    let n = model.n();
    let h = half_len(n);
    let fft = model.fft();
    let kmax = ic_band_limit(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SpectralState::zeros(n);
    for m in 0..2 {
        let noise: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut spec = fft.forward_vec(&noise);
        for j in 0..n {
            let ky = signed_index(j, n) as f64;
            for i in 0..h {
                let r = (ky * ky + (i * i) as f64).sqrt();
                if r == 0.0 || r > kmax {
                    spec[j * h + i] = Complex64::default();
                }
            }
        }
        let mut field = fft.inverse_vec(&spec);
        let mean = field.iter().sum::<f64>() / field.len() as f64;
        field.iter_mut().for_each(|v| *v -= mean);
        let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
        field.iter_mut().for_each(|v| *v *= amplitude / rms);
        state.q_hat[m] = fft.forward_vec(&field);
        state.q_hat[m][0] = Complex64::default();
    }
    Ok(state)
}
