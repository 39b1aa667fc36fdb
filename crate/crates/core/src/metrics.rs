//! Offline skill scores and coupled low-resolution runs.

use std::fmt::Write as _;

use num_complex::Complex64;

use crate::cnn::{CnnModel, Predictor};
use crate::dataset::{Dataset, INPUT_CHANNELS, TARGET_CHANNELS};
use crate::error::{Error, Result};
use crate::filtering::Coarsener;
use crate::qg::{AbHistory, Layers, ModelParams, QgModel, Simulation, SpectralState};
use crate::specanalysis::{mean_spectrum, meridional_avg_spectrum, SpectrumSeries};

fn check_sets(pred: &[&[f64]], truth: &[&[f64]]) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::Argument("empty sample set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::shape(t.len(), p.len()));
        }
    }
    Ok(())
}

/// `sqrt(sum |pred - true|^2 / sum |true|^2)` over the sample set.
pub fn rmse(pred: &[&[f64]], truth: &[&[f64]]) -> Result<f64> {
    check_sets(pred, truth)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(t.iter()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
    }
    if den == 0.0 {
        return Err(Error::Argument("true fields are identically zero".into()));
    }
    Ok((num / den).sqrt())
}

fn pearson(p: &[f64], t: &[f64]) -> Result<f64> {
    let n = p.len() as f64;
    let pm = p.iter().sum::<f64>() / n;
    let tm = t.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(t) {
        let (da, db) = (a - pm, b - tm);
        cov += da * db;
        vp += da * da;
        vt += db * db;
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::Argument("zero-variance field".into()));
    }
    Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

/// Domain-mean-removed correlation, averaged over samples.
pub fn cc(pred: &[&[f64]], truth: &[&[f64]]) -> Result<f64> {
    check_sets(pred, truth)?;
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        sum += pearson(p, t)?;
    }
    Ok(sum / truth.len() as f64)
}

/// Mean relative spectral error together with the bins left out of the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumError {
    pub value: f64,
    /// Bins whose true power is below [`SPECTRUM_FLOOR`] of the peak.
    pub excluded: Vec<usize>,
}

pub const SPECTRUM_FLOOR: f64 = 1e-10;

/// `mean_k |(S_pred - S_true) / S_true|` over bins with usable true power.
pub fn spectrum_rmse_from_spectra(pred: &[f64], truth: &[f64]) -> Result<SpectrumError> {
    if pred.len() != truth.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    let peak = truth.iter().fold(0.0f64, |m, v| m.max(*v));
    let mut excluded = Vec::new();
    let (mut sum, mut used) = (0.0, 0usize);
    for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
        if !(*t > 0.0) || *t < SPECTRUM_FLOOR * peak {
            excluded.push(k);
            continue;
        }
        sum += ((p - t) / t).abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Argument("true spectrum has no usable bins".into()));
    }
    Ok(SpectrumError {
        value: sum / used as f64,
        excluded,
    })
}

/// Spectral error of sample-averaged meridional spectra.
pub fn spectrum_rmse(pred: &[&[f64]], truth: &[&[f64]], n: usize) -> Result<SpectrumError> {
    check_sets(pred, truth)?;
    let p = mean_spectrum(pred, n, "prediction")?;
    let t = mean_spectrum(truth, n, "truth")?;
    spectrum_rmse_from_spectra(&p.power, &t.power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics {
    pub rmse: f64,
    pub cc: f64,
    pub spectrum_rmse: f64,
    pub excluded_bins: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineReport {
    pub layers: Vec<LayerMetrics>,
    pub n_samples: usize,
    pub model_id: String,
    pub dataset_id: String,
}

impl OfflineReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,rmse,cc,spectrum_rmse\n");
        for (m, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", m + 1, l.rmse, l.cc, l.spectrum_rmse);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "model = {:?}\ndataset = {:?}\nsamples = {}\n",
            self.model_id, self.dataset_id, self.n_samples
        );
        for (m, l) in self.layers.iter().enumerate() {
            let _ = write!(
                s,
                "rmse_{k} = {}\ncc_{k} = {}\nspectrum_rmse_{k} = {}\n",
                toml_float(l.rmse),
                toml_float(l.cc),
                toml_float(l.spectrum_rmse),
                k = m + 1
            );
        }
        s
    }
}

/// TOML float literal; integral values keep a decimal point.
pub fn toml_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

/// Scores a network against every sample of a dataset, layer by layer.
pub fn evaluate_offline(model: &CnnModel, data: &Dataset, model_id: &str) -> Result<OfflineReport> {
    if data.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    if data.n != model.n {
        return Err(Error::shape(model.n, data.n));
    }
    let preds = model.predict_records(&data.records)?;
    let np = data.n * data.n;
    let mut layers = Vec::with_capacity(TARGET_CHANNELS);
    for m in 0..TARGET_CHANNELS {
        let p: Vec<&[f64]> = preds.iter().map(|v| &v[m * np..(m + 1) * np]).collect();
        let t: Vec<&[f64]> = data.records.iter().map(|r| &r.targets[m * np..(m + 1) * np]).collect();
        let se = spectrum_rmse(&p, &t, data.n)?;
        layers.push(LayerMetrics {
            rmse: rmse(&p, &t)?,
            cc: cc(&p, &t)?,
            spectrum_rmse: se.value,
            excluded_bins: se.excluded,
        });
    }
    Ok(OfflineReport {
        layers,
        n_samples: data.len(),
        model_id: model_id.to_string(),
        dataset_id: data.case_label.clone(),
    })
}

/// Source of an extra spectral PV tendency for a coupled run.
pub trait Closure {
    fn tendency(&mut self, model: &QgModel, state: &SpectralState) -> Result<Option<Layers<Vec<Complex64>>>>;
}

/// Bare solver.
pub struct NoClosure;

impl Closure for NoClosure {
    fn tendency(&mut self, _: &QgModel, _: &SpectralState) -> Result<Option<Layers<Vec<Complex64>>>> {
        Ok(None)
    }
}

/// Network prediction of the subgrid forcing from the resolved velocities.
pub struct CnnClosure<'a> {
    predictor: Predictor<'a>,
    n: usize,
}

impl<'a> CnnClosure<'a> {
    pub fn new(model: &'a CnnModel) -> Result<Self> {
        if model.in_ch() != INPUT_CHANNELS || model.out_ch() != TARGET_CHANNELS {
            return Err(Error::Argument(format!(
                "closure needs {INPUT_CHANNELS} inputs and {TARGET_CHANNELS} outputs, network has {} and {}",
                model.in_ch(),
                model.out_ch()
            )));
        }
        Ok(CnnClosure {
            predictor: model.predictor()?,
            n: model.n,
        })
    }
}

impl Closure for CnnClosure<'_> {
    fn tendency(&mut self, model: &QgModel, state: &SpectralState) -> Result<Option<Layers<Vec<Complex64>>>> {
        if model.n() != self.n {
            return Err(Error::shape(self.n, model.n()));
        }
        let d = model.diagnostics(state);
        let np = self.n * self.n;
        let mut x = Vec::with_capacity(INPUT_CHANNELS * np);
        for m in 0..2 {
            x.extend_from_slice(&d.u[m]);
            x.extend_from_slice(&d.v[m]);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                step: state.step_index,
            });
        }
        let pi = self.predictor.predict(&x)?;
        let fft = model.fft();
        Ok(Some([fft.forward_vec(&pi[..np]), fft.forward_vec(&pi[np..])]))
    }
}

/// States of a coupled run, truncated at the first non-finite step.
#[derive(Debug, Clone)]
pub struct OnlineRun {
    /// Initial state and every `snapshot_interval`-th state.
    pub trajectory: Vec<SpectralState>,
    pub steps_run: u64,
    pub n_steps: u64,
    pub stable: bool,
    pub diverged_at: Option<u64>,
}

/// Integrates the low-resolution model with the closure's tendency added each step.
pub fn run_online(
    closure: &mut dyn Closure,
    params_lo: &ModelParams,
    ic: SpectralState,
    n_steps: u64,
    snapshot_interval: u64,
) -> Result<OnlineRun> {
    if snapshot_interval == 0 {
        return Err(Error::Argument("snapshot interval must be >= 1".into()));
    }
    let model = QgModel::new(params_lo)?;
    if ic.n != model.n() {
        return Err(Error::shape(model.n(), ic.n));
    }
    let mut state = ic;
    let mut history = AbHistory::default();
    let mut run = OnlineRun {
        trajectory: vec![state.clone()],
        steps_run: 0,
        n_steps,
        stable: true,
        diverged_at: None,
    };
    for s in 1..=n_steps {
        let step = closure
            .tendency(&model, &state)
            .and_then(|extra| model.step_with_forcing(&mut state, &mut history, extra.as_ref()));
        match step {
            Ok(()) => {}
            Err(Error::Diverged { .. }) => {
                run.stable = false;
                run.diverged_at = Some(s);
                return Ok(run);
            }
            Err(e) => return Err(e),
        }
        run.steps_run = s;
        if s % snapshot_interval == 0 {
            run.trajectory.push(state.clone());
        }
    }
    Ok(run)
}

/// Fraction of leading snapshots skipped before time averaging.
pub const DISCARD_FRACTION: f64 = 0.1;

fn retained(trajectory: &[SpectralState], discard: f64) -> Result<&[SpectralState]> {
    if trajectory.is_empty() {
        return Err(Error::Argument("empty trajectory".into()));
    }
    if !(0.0..1.0).contains(&discard) {
        return Err(Error::Argument(format!("discard fraction {discard} outside [0, 1)")));
    }
    let skip = ((trajectory.len() as f64 * discard).floor() as usize).min(trajectory.len() - 1);
    Ok(&trajectory[skip..])
}

/// Time-mean meridional spectra of `(u^2 + v^2) / 2` per layer.
pub fn ke_spectrum(trajectory: &[SpectralState], model: &QgModel, discard: f64) -> Result<[SpectrumSeries; 2]> {
    let kept = retained(trajectory, discard)?;
    let n = model.n();
    let mut out: [SpectrumSeries; 2] = std::array::from_fn(|m| {
        let mut s = meridional_avg_spectrum(&vec![0.0; n * n], n).expect("even grid");
        s.field = "ke".into();
        s.layer = Some(m + 1);
        s
    });
    let w = 0.5 / kept.len() as f64;
    for state in kept {
        if state.n != n {
            return Err(Error::shape(n, state.n));
        }
        let d = model.diagnostics(state);
        for m in 0..2 {
            let su = meridional_avg_spectrum(&d.u[m], n)?;
            let sv = meridional_avg_spectrum(&d.v[m], n)?;
            for ((o, a), b) in out[m].power.iter_mut().zip(&su.power).zip(&sv.power) {
                *o += w * (a + b);
            }
        }
    }
    Ok(out)
}

/// Normalized histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Pdf {
    /// `n_bins + 1` edges.
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
    /// Samples outside the range, which do not enter the normalization.
    pub dropped: usize,
}

impl Pdf {
    pub fn integral(&self) -> f64 {
        self.density
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lower,upper,density\n");
        for (d, e) in self.density.iter().zip(self.edges.windows(2)) {
            let _ = writeln!(s, "{:e},{:e},{:e}", e[0], e[1], d);
        }
        s
    }
}

/// Histogram of `values` on `n_bins` equal bins over `[lo, hi]`; the top edge is closed.
pub fn histogram_pdf(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> Result<Pdf> {
    if n_bins < 2 {
        return Err(Error::Argument(format!("need at least 2 bins, got {n_bins}")));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::Argument(format!("empty range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; n_bins];
    let mut dropped = 0;
    for &v in values {
        if !(v >= lo && v <= hi) {
            dropped += 1;
            continue;
        }
        let b = (((v - lo) / width).floor() as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let kept = values.len() - dropped;
    if kept == 0 {
        return Err(Error::Argument("no samples inside the histogram range".into()));
    }
    let density = counts.iter().map(|&c| c as f64 / (kept as f64 * width)).collect();
    Ok(Pdf {
        edges,
        density,
        dropped,
    })
}

/// `mean +- half_width * std` of a sample set.
pub fn sigma_range(values: &[f64], half_width: f64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Argument("no samples".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(Error::Argument("samples have zero spread".into()));
    }
    Ok((mean - half_width * std, mean + half_width * std))
}

/// Upper-layer PV values of the retained snapshots.
pub fn upper_pv_samples(trajectory: &[SpectralState], model: &QgModel, discard: f64) -> Result<Vec<f64>> {
    let kept = retained(trajectory, discard)?;
    let mut out = Vec::with_capacity(kept.len() * model.n() * model.n());
    for s in kept {
        if s.n != model.n() {
            return Err(Error::shape(model.n(), s.n));
        }
        out.extend(model.fft().inverse_vec(&s.q_hat[0]));
    }
    Ok(out)
}

pub fn pv_pdf(trajectory: &[SpectralState], model: &QgModel, n_bins: usize, range: (f64, f64)) -> Result<Pdf> {
    histogram_pdf(&upper_pv_samples(trajectory, model, DISCARD_FRACTION)?, n_bins, range.0, range.1)
}

#[derive(Debug, Clone)]
pub struct OnlineReport {
    pub ke: [SpectrumSeries; 2],
    pub pdf: Pdf,
    pub steps_run: u64,
    pub n_steps: u64,
    pub stable: bool,
    pub diverged_at: Option<u64>,
}

impl OnlineReport {
    /// Builds a report from a run; an unstable run is summarized over its finite part.
    pub fn from_run(run: &OnlineRun, params_lo: &ModelParams, n_bins: usize, range: (f64, f64)) -> Result<Self> {
        let model = QgModel::new(params_lo)?;
        Ok(OnlineReport {
            ke: ke_spectrum(&run.trajectory, &model, DISCARD_FRACTION)?,
            pdf: pv_pdf(&run.trajectory, &model, n_bins, range)?,
            steps_run: run.steps_run,
            n_steps: run.n_steps,
            stable: run.stable,
            diverged_at: run.diverged_at,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "stable = {}\nsteps_run = {}\nn_steps = {}\ndiverged_at = {}\nke_total_1 = {}\nke_total_2 = {}\npdf_dropped = {}\n",
            self.stable,
            self.steps_run,
            self.n_steps,
            self.diverged_at.map(|s| s.to_string()).unwrap_or_else(|| "\"none\"".into()),
            toml_float(self.ke[0].total()),
            toml_float(self.ke[1].total()),
            self.pdf.dropped
        )
    }
}

/// Filtered and coarsened high-resolution run, the target for coupled runs.
#[derive(Debug, Clone)]
pub struct FilteredReference {
    /// Coarse state at the end of spin-up; clock reset to zero.
    pub ic_lo: SpectralState,
    pub trajectory: Vec<SpectralState>,
}

/// Spins up `ic_hi`, then records the coarsened state every `snapshot_interval` steps.
pub fn filtered_reference(
    params_hi: &ModelParams,
    coarsener: &Coarsener,
    ic_hi: SpectralState,
    spinup_steps: u64,
    n_steps: u64,
    snapshot_interval: u64,
) -> Result<FilteredReference> {
    if snapshot_interval == 0 {
        return Err(Error::Argument("snapshot interval must be >= 1".into()));
    }
    let mut sim = Simulation::new(params_hi, ic_hi)?;
    sim.advance(spinup_steps)?;
    let coarse = |state: &SpectralState, step: u64| -> Result<SpectralState> {
        let mut c = coarsener.apply_state(state)?;
        c.step_index = step;
        c.time = step as f64 * params_hi.dt;
        Ok(c)
    };
    let ic_lo = coarse(&sim.state, 0)?;
    let mut trajectory = vec![ic_lo.clone()];
    for s in 1..=n_steps {
        sim.step()?;
        if s % snapshot_interval == 0 {
            trajectory.push(coarse(&sim.state, s)?);
        }
    }
    Ok(FilteredReference { ic_lo, trajectory })
}

/// Spectral error of a run's kinetic energy spectra against a reference, averaged over layers.
pub fn ke_error(run: &[SpectrumSeries; 2], reference: &[SpectrumSeries; 2]) -> Result<f64> {
    let mut sum = 0.0;
    for m in 0..2 {
        sum += spectrum_rmse_from_spectra(&run[m].power, &reference[m].power)?.value;
    }
    Ok(sum / 2.0)
}
