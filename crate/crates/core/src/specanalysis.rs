//! Fourier diagnostics of fields, kernels and network activations.
//!
//! Transforms are unnormalized forward, `1/N^2` on the inverse. One-dimensional
//! zonal spectra use `|X_k / N|^2` folded onto `k >= 0`, so that a spectrum sums
//! to the mean square of the field.

use std::fmt::Write as _;

use num_complex::Complex64;
use realfft::RealFftPlanner;

use crate::cnn::{pad_kernel, CnnModel};
use crate::error::{Error, Result};
pub use crate::fft::{fft2, ifft2_full};

/// Meridionally averaged power against zonal wavenumber index.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSeries {
    /// Zonal wavenumber indices `0..=n/2`.
    pub k: Vec<usize>,
    pub power: Vec<f64>,
    pub field: String,
    pub layer: Option<usize>,
    pub channel_averaged: bool,
}

impl SpectrumSeries {
    fn zeros(n: usize, field: impl Into<String>) -> Self {
        SpectrumSeries {
            k: (0..=n / 2).collect(),
            power: vec![0.0; n / 2 + 1],
            field: field.into(),
            layer: None,
            channel_averaged: false,
        }
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }

    fn accumulate(&mut self, other: &[f64], weight: f64) {
        for (p, o) in self.power.iter_mut().zip(other) {
            *p += o * weight;
        }
    }
}

/// Magnitude of a zero-padded kernel's full spectrum, in FFT order.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpectrum {
    /// One-based layer number.
    pub layer: usize,
    pub in_channel: usize,
    pub out_channel: usize,
    pub n: usize,
    /// `|W~^(l, k)|`, row-major `[ky][kx]`.
    pub magnitude: Vec<f64>,
}

/// `|X_k / n|^2` of one real row, folded onto `0..=n/2`.
struct RowSpectrum {
    r2c: std::sync::Arc<dyn realfft::RealToComplex<f64>>,
    n: usize,
    input: Vec<f64>,
    output: Vec<Complex64>,
}

impl RowSpectrum {
    fn new(n: usize) -> Self {
        let r2c = RealFftPlanner::<f64>::new().plan_fft_forward(n);
        let output = r2c.make_output_vec();
        RowSpectrum {
            r2c,
            n,
            input: vec![0.0; n],
            output,
        }
    }

    fn add_row(&mut self, row: &[f64], acc: &mut [f64]) {
        self.input.copy_from_slice(row);
        self.r2c
            .process(&mut self.input, &mut self.output)
            .expect("row transform sizes match");
        let norm = 1.0 / (self.n * self.n) as f64;
        for (k, (a, c)) in acc.iter_mut().zip(&self.output).enumerate() {
            let fold = if k == 0 || 2 * k == self.n { 1.0 } else { 2.0 };
            *a += fold * c.norm_sqr() * norm;
        }
    }
}

fn check_square(field: &[f64], n: usize) -> Result<()> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::Argument(format!("grid size {n} must be even")));
    }
    if field.len() != n * n {
        return Err(Error::shape(n * n, field.len()));
    }
    Ok(())
}

/// Zonal power spectrum averaged over rows.
pub fn meridional_avg_spectrum(field: &[f64], n: usize) -> Result<SpectrumSeries> {
    check_square(field, n)?;
    let mut out = SpectrumSeries::zeros(n, "field");
    let mut rs = RowSpectrum::new(n);
    for row in field.chunks_exact(n) {
        rs.add_row(row, &mut out.power);
    }
    for p in &mut out.power {
        *p /= n as f64;
    }
    Ok(out)
}

/// Mean of [`meridional_avg_spectrum`] over a set of equally sized fields.
pub fn mean_spectrum(fields: &[&[f64]], n: usize, name: &str) -> Result<SpectrumSeries> {
    if fields.is_empty() {
        return Err(Error::Argument("no fields to average".into()));
    }
    let mut out = SpectrumSeries::zeros(n, name);
    let w = 1.0 / fields.len() as f64;
    for f in fields {
        out.accumulate(&meridional_avg_spectrum(f, n)?.power, w);
    }
    Ok(out)
}

/// Spectra of all kernels of one (one-based) layer, padded to `n x n`.
pub fn kernel_spectra(model: &CnnModel, layer: usize, n: usize) -> Result<Vec<KernelSpectrum>> {
    let l = model
        .layers
        .get(layer.wrapping_sub(1))
        .ok_or_else(|| Error::Argument(format!("no layer {layer}")))?;
    let mut out = Vec::with_capacity(l.in_ch * l.out_ch);
    for o in 0..l.out_ch {
        for i in 0..l.in_ch {
            let spec = fft2(&pad_kernel(l.kernel(o, i), n)?, n);
            out.push(KernelSpectrum {
                layer,
                in_channel: i,
                out_channel: o,
                n,
                magnitude: spec.iter().map(|c| c.norm()).collect(),
            });
        }
    }
    Ok(out)
}

/// Channel- and sample-averaged spectra of the captured activations of each requested
/// (one-based) layer, in the network's normalized units.
pub fn activation_spectra(model: &CnnModel, inputs: &[&[f64]], layers: &[usize]) -> Result<Vec<SpectrumSeries>> {
    if inputs.is_empty() {
        return Err(Error::Argument("empty sample set".into()));
    }
    let n = model.n;
    let np = n * n;
    let mut out: Vec<SpectrumSeries> = layers
        .iter()
        .map(|&l| {
            let mut s = SpectrumSeries::zeros(n, "activation");
            s.layer = Some(l);
            s.channel_averaged = true;
            s
        })
        .collect();
    let mut failure = None;
    model.forward_each(inputs, layers, |_, fwd| {
        for (slot, (_, act)) in out.iter_mut().zip(&fwd.captured) {
            let ch = act.len() / np;
            let w = 1.0 / (ch * inputs.len()) as f64;
            for c in 0..ch {
                match meridional_avg_spectrum(&act[c * np..(c + 1) * np], n) {
                    Ok(s) => slot.accumulate(&s.power, w),
                    Err(e) => failure = Some(e),
                }
            }
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Support of the rectifier: grid points `(y, x)` where `h > 0`.
pub fn relu_support(h: &[f64], n: usize) -> Vec<(usize, usize)> {
    (0..n * n).filter(|&p| h[p] > 0.0).map(|p| (p / n, p % n)).collect()
}

/// Full spectrum of `ReLU(h)` built from the positive support of `h`:
/// the transform of `h` restricted to the points where it is positive.
pub fn relu_spectral_decomposition(h: &[f64], n: usize) -> Result<Vec<Complex64>> {
    check_square(h, n)?;
    let mut masked = vec![0.0; n * n];
    for (y, x) in relu_support(h, n) {
        masked[y * n + x] = h[y * n + x];
    }
    Ok(fft2(&masked, n))
}

/// Binwise ratio of predicted to true spectra with low-power bins flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumRatio {
    /// Ratio per bin; zero where flagged.
    pub ratio: SpectrumSeries,
    pub flagged: Vec<bool>,
}

/// Bins whose true power is below this fraction of the largest bin are flagged.
pub const RATIO_FLOOR: f64 = 1e-10;

pub fn output_spectrum_ratio(pred: &[&[f64]], truth: &[&[f64]], n: usize) -> Result<SpectrumRatio> {
    if pred.len() != truth.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    let p = mean_spectrum(pred, n, "prediction")?;
    let t = mean_spectrum(truth, n, "truth")?;
    let peak = t.power.iter().fold(0.0f64, |m, v| m.max(*v));
    if !(peak > 0.0) {
        return Err(Error::Argument("truth spectrum is identically zero".into()));
    }
    let mut ratio = SpectrumSeries::zeros(n, "ratio");
    let mut flagged = vec![false; ratio.power.len()];
    for k in 0..ratio.power.len() {
        if t.power[k] < RATIO_FLOOR * peak {
            flagged[k] = true;
        } else {
            ratio.power[k] = p.power[k] / t.power[k];
        }
    }
    Ok(SpectrumRatio { ratio, flagged })
}

/// CSV with columns `k_x,power,field,layer,channel_averaged`.
pub fn spectra_to_csv(series: &[SpectrumSeries]) -> String {
    let mut s = String::from("k_x,power,field,layer,channel_averaged\n");
    for ser in series {
        let layer = ser.layer.map(|l| l.to_string()).unwrap_or_default();
        for (k, p) in ser.k.iter().zip(&ser.power) {
            let _ = writeln!(s, "{k},{p:e},{},{layer},{}", ser.field, ser.channel_averaged);
        }
    }
    s
}
