use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::conv::{conv2d_periodic, extract_taps, kernel_spectrum, mac, mac_conj, KERNEL, KERNEL_TAPS};
use crate::dataset::{ChannelStats, SampleRecord, INPUT_CHANNELS, TARGET_CHANNELS};
use crate::error::{Error, Result};
use crate::fft::Fft2;

/// Channel plan of an all-convolutional network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    /// Grid size the network runs on.
    pub n: usize,
    pub in_ch: usize,
    pub hidden: usize,
    pub out_ch: usize,
    pub n_layers: usize,
}

impl Arch {
    pub const LAYERS: usize = 9;

    /// Velocity-to-forcing network with `hidden` channels per hidden layer.
    pub fn closure(n: usize, hidden: usize) -> Self {
        Arch {
            n,
            in_ch: INPUT_CHANNELS,
            hidden,
            out_ch: TARGET_CHANNELS,
            n_layers: Self::LAYERS,
        }
    }

    /// `(in, out)` channels of layer `idx` (zero-based).
    pub fn layer_channels(&self, idx: usize) -> (usize, usize) {
        let cin = if idx == 0 { self.in_ch } else { self.hidden };
        let cout = if idx + 1 == self.n_layers { self.out_ch } else { self.hidden };
        (cin, cout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out][in][5][5]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        ConvLayer {
            in_ch,
            out_ch,
            weights: vec![0.0; out_ch * in_ch * KERNEL_TAPS],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn kernel(&self, o: usize, i: usize) -> &[f64] {
        &self.weights[(o * self.in_ch + i) * KERNEL_TAPS..][..KERNEL_TAPS]
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub n: usize,
    pub layers: Vec<ConvLayer>,
    pub norm: ChannelStats,
}

/// Gradient of every parameter, shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ConvLayer>,
}

impl Gradients {
    pub fn zeros_like(model: &CnnModel) -> Self {
        Gradients {
            layers: model.layers.iter().map(|l| ConvLayer::zeros(l.in_ch, l.out_ch)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Output of a forward pass and the requested hidden activations.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// De-normalized output, `[out_ch][n][n]`.
    pub output: Vec<f64>,
    /// `(layer, activation)` with one-based layer numbers, post-nonlinearity.
    pub captured: Vec<(usize, Vec<f64>)>,
}

impl CnnModel {
    /// Fan-in scaled uniform initialisation of weights and biases, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(arch: Arch, rng: &mut ChaCha8Rng) -> Result<Self> {
        if arch.n_layers < 1 || arch.n < KERNEL || arch.in_ch == 0 || arch.out_ch == 0 {
            return Err(Error::Argument(format!("invalid architecture {arch:?}")));
        }
        if arch.n_layers > 1 && arch.hidden == 0 {
            return Err(Error::Argument("hidden layers need at least one channel".into()));
        }
        let mut layers = Vec::with_capacity(arch.n_layers);
        for idx in 0..arch.n_layers {
            let (cin, cout) = arch.layer_channels(idx);
            let bound = 1.0 / ((cin * KERNEL_TAPS) as f64).sqrt();
            let mut layer = ConvLayer::zeros(cin, cout);
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.random_range(-bound..bound);
            }
            layers.push(layer);
        }
        Ok(CnnModel {
            n: arch.n,
            layers,
            norm: ChannelStats::identity(arch.in_ch, arch.out_ch),
        })
    }

    pub fn arch(&self) -> Arch {
        let n_layers = self.layers.len();
        Arch {
            n: self.n,
            in_ch: self.layers[0].in_ch,
            hidden: if n_layers > 1 { self.layers[0].out_ch } else { 0 },
            out_ch: self.layers[n_layers - 1].out_ch,
            n_layers,
        }
    }

    pub fn in_ch(&self) -> usize {
        self.layers[0].in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.layers[self.layers.len() - 1].out_ch
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(ConvLayer::n_params).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Checks that layer shapes chain and match the normalisation statistics.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Argument("model has no layers".into()));
        }
        for (idx, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.in_ch * l.out_ch * KERNEL_TAPS || l.bias.len() != l.out_ch {
                return Err(Error::shape(
                    format!("layer {} parameters", idx + 1),
                    format!("{} weights, {} biases", l.weights.len(), l.bias.len()),
                ));
            }
            if idx > 0 && self.layers[idx - 1].out_ch != l.in_ch {
                return Err(Error::shape(self.layers[idx - 1].out_ch, l.in_ch));
            }
        }
        let s = &self.norm;
        if s.input_mean.len() != self.in_ch() || s.input_std.len() != self.in_ch() {
            return Err(Error::shape(self.in_ch(), s.input_mean.len()));
        }
        if s.target_mean.len() != self.out_ch() || s.target_std.len() != self.out_ch() {
            return Err(Error::shape(self.out_ch(), s.target_mean.len()));
        }
        Ok(())
    }

    pub fn normalize_input(&self, x: &[f64]) -> Vec<f64> {
        standardize(x, &self.norm.input_mean, &self.norm.input_std, self.n * self.n)
    }

    pub fn normalize_target(&self, t: &[f64]) -> Vec<f64> {
        standardize(t, &self.norm.target_mean, &self.norm.target_std, self.n * self.n)
    }

    pub fn denormalize_output(&self, y: &[f64]) -> Vec<f64> {
        let np = self.n * self.n;
        y.chunks(np)
            .enumerate()
            .flat_map(|(c, ch)| {
                let (m, s) = (self.norm.target_mean[c], self.norm.target_std[c]);
                ch.iter().map(move |v| v * s + m)
            })
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_ch() * self.n * self.n {
            return Err(Error::shape(self.in_ch() * self.n * self.n, x.len()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Argument("non-finite network input".into()));
        }
        Ok(())
    }

    /// Runs the network on one physical-unit input, returning de-normalized output and the
    /// post-activation fields of the requested (one-based) layers.
    pub fn forward(&self, input: &[f64], capture: &[usize]) -> Result<ForwardOutput> {
        self.check_input(input)?;
        for &c in capture {
            if c == 0 || c > self.layers.len() {
                return Err(Error::Argument(format!("no layer {c} to capture")));
            }
        }
        let engine = Engine::new(self)?;
        let mut captured = Vec::new();
        let raw = engine.forward(self, &self.normalize_input(input), None, capture, &mut captured);
        Ok(ForwardOutput {
            output: self.denormalize_output(&raw),
            captured,
        })
    }

    /// Runs [`CnnModel::forward`] over many inputs, handing each result to `f` in order.
    pub fn forward_each(
        &self,
        inputs: &[&[f64]],
        capture: &[usize],
        mut f: impl FnMut(usize, ForwardOutput),
    ) -> Result<()> {
        for &c in capture {
            if c == 0 || c > self.layers.len() {
                return Err(Error::Argument(format!("no layer {c} to capture")));
            }
        }
        let engine = Engine::new(self)?;
        for (s, x) in inputs.iter().enumerate() {
            self.check_input(x)?;
            let mut captured = Vec::new();
            let raw = engine.forward(self, &self.normalize_input(x), None, capture, &mut captured);
            f(
                s,
                ForwardOutput {
                    output: self.denormalize_output(&raw),
                    captured,
                },
            );
        }
        Ok(())
    }

    /// Reference forward pass built on direct spatial convolution.
    pub fn forward_spatial(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = self.normalize_input(input);
        let last = self.layers.len() - 1;
        for (idx, l) in self.layers.iter().enumerate() {
            cur = conv2d_periodic(&l.weights, &l.bias, &cur, l.in_ch, l.out_ch, self.n)?;
            if idx < last {
                relu(&mut cur);
            }
        }
        Ok(self.denormalize_output(&cur))
    }

    /// Batched inference without capture.
    pub fn predict_batch(&self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let engine = Engine::new(self)?;
        inputs
            .iter()
            .map(|x| {
                self.check_input(x)?;
                let raw = engine.forward(self, &self.normalize_input(x), None, &[], &mut Vec::new());
                Ok(self.denormalize_output(&raw))
            })
            .collect()
    }

    /// Inference handle that keeps the kernel spectra between calls.
    pub fn predictor(&self) -> Result<Predictor<'_>> {
        Ok(Predictor {
            model: self,
            engine: Engine::new(self)?,
        })
    }

    pub fn predict_records(&self, records: &[SampleRecord]) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<&[f64]> = records.iter().map(|r| r.inputs.as_slice()).collect();
        self.predict_batch(&inputs)
    }
}

pub struct Predictor<'a> {
    model: &'a CnnModel,
    engine: Engine,
}

impl Predictor<'_> {
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.model.check_input(input)?;
        let raw = self
            .engine
            .forward(self.model, &self.model.normalize_input(input), None, &[], &mut Vec::new());
        Ok(self.model.denormalize_output(&raw))
    }
}

fn standardize(x: &[f64], mean: &[f64], std: &[f64], np: usize) -> Vec<f64> {
    x.chunks(np)
        .enumerate()
        .flat_map(|(c, ch)| {
            let (m, s) = (mean[c], std[c]);
            ch.iter().map(move |v| (v - m) / s)
        })
        .collect()
}

fn relu(v: &mut [f64]) {
    for x in v {
        if !(*x > 0.0) {
            *x = 0.0;
        }
    }
}

/// Per-sample record of what the backward pass needs.
#[derive(Default)]
pub(crate) struct Stash {
    /// Spectra of each layer's input, for layers at or above the lowest trainable one.
    x_hat: Vec<Vec<Complex64>>,
    /// Post-activation outputs of hidden layers.
    acts: Vec<Vec<f64>>,
}

/// Spectral convolution engine holding the kernel spectra of a model.
pub(crate) struct Engine {
    n: usize,
    bins: usize,
    fft: Fft2,
    /// Per layer, `[out][in][bins]`.
    spectra: Vec<Vec<Complex64>>,
}

impl Engine {
    pub(crate) fn new(model: &CnnModel) -> Result<Self> {
        model.validate()?;
        let fft = Fft2::new(model.n);
        let bins = fft.spectral_len();
        let mut e = Engine {
            n: model.n,
            bins,
            fft,
            spectra: vec![Vec::new(); model.layers.len()],
        };
        for idx in 0..model.layers.len() {
            e.refresh(model, idx)?;
        }
        Ok(e)
    }

    /// Recomputes the kernel spectra of layer `idx` after its weights changed.
    pub(crate) fn refresh(&mut self, model: &CnnModel, idx: usize) -> Result<()> {
        let l = &model.layers[idx];
        let mut s = Vec::with_capacity(l.out_ch * l.in_ch * self.bins);
        for o in 0..l.out_ch {
            for i in 0..l.in_ch {
                s.extend(kernel_spectrum(&self.fft, l.kernel(o, i))?);
            }
        }
        self.spectra[idx] = s;
        Ok(())
    }

    /// Forward pass on a normalized input, returning the raw (normalized) output.
    pub(crate) fn forward(
        &self,
        model: &CnnModel,
        x: &[f64],
        mut stash: Option<(&mut Stash, usize)>,
        capture: &[usize],
        captured: &mut Vec<(usize, Vec<f64>)>,
    ) -> Vec<f64> {
        let (n, bins) = (self.n, self.bins);
        let np = n * n;
        let last = model.layers.len() - 1;
        let mut cur = x.to_vec();
        let mut acc = vec![Complex64::default(); bins];
        for (idx, l) in model.layers.iter().enumerate() {
            let mut x_hat = vec![Complex64::default(); l.in_ch * bins];
            for i in 0..l.in_ch {
                self.fft
                    .forward(&cur[i * np..(i + 1) * np], &mut x_hat[i * bins..(i + 1) * bins]);
            }
            let mut out = vec![0.0; l.out_ch * np];
            let k = &self.spectra[idx];
            for o in 0..l.out_ch {
                acc.fill(Complex64::default());
                for i in 0..l.in_ch {
                    let kb = (o * l.in_ch + i) * bins;
                    mac(&mut acc, &k[kb..kb + bins], &x_hat[i * bins..(i + 1) * bins]);
                }
                acc[0].re += l.bias[o] * np as f64;
                self.fft.inverse(&acc, &mut out[o * np..(o + 1) * np]);
            }
            if idx < last {
                relu(&mut out);
            }
            if capture.contains(&(idx + 1)) {
                captured.push((idx + 1, out.clone()));
            }
            if let Some((s, lowest)) = stash.as_mut() {
                if idx >= *lowest {
                    s.x_hat.push(x_hat);
                    if idx < last {
                        s.acts.push(out.clone());
                    }
                }
            }
            cur = out;
        }
        cur
    }

    /// Batch-mean squared error in normalized space and its gradient with respect to
    /// every parameter of layers `lowest..` (zero-based); lower layers get zero gradients.
    pub(crate) fn loss_and_gradients(
        &self,
        model: &CnnModel,
        inputs: &[&[f64]],
        targets: &[&[f64]],
        lowest: usize,
    ) -> (f64, Gradients) {
        let (n, bins) = (self.n, self.bins);
        let np = n * n;
        let n_layers = model.layers.len();
        let out_len = model.out_ch() * np;
        let scale = 1.0 / (inputs.len() * out_len) as f64;

        let mut spec_grads: Vec<Vec<Complex64>> = (0..n_layers)
            .map(|idx| {
                let l = &model.layers[idx];
                if idx >= lowest {
                    vec![Complex64::default(); l.out_ch * l.in_ch * bins]
                } else {
                    Vec::new()
                }
            })
            .collect();
        let mut grads = Gradients::zeros_like(model);
        let mut loss = 0.0;

        for (x, t) in inputs.iter().zip(targets) {
            let mut stash = Stash::default();
            let y = self.forward(model, x, Some((&mut stash, lowest)), &[], &mut Vec::new());
            let mut delta: Vec<f64> = y
                .iter()
                .zip(t.iter())
                .map(|(a, b)| {
                    let d = a - b;
                    loss += d * d;
                    2.0 * d * scale
                })
                .collect();
            for idx in (lowest..n_layers).rev() {
                let l = &model.layers[idx];
                let s = idx - lowest;
                if idx + 1 < n_layers {
                    for (d, g) in delta.iter_mut().zip(&stash.acts[s]) {
                        if !(*g > 0.0) {
                            *d = 0.0;
                        }
                    }
                }
                let mut d_hat = vec![Complex64::default(); l.out_ch * bins];
                for o in 0..l.out_ch {
                    self.fft
                        .forward(&delta[o * np..(o + 1) * np], &mut d_hat[o * bins..(o + 1) * bins]);
                    grads.layers[idx].bias[o] += d_hat[o * bins].re;
                }
                let x_hat = &stash.x_hat[s];
                let g = &mut spec_grads[idx];
                for o in 0..l.out_ch {
                    let dh = &d_hat[o * bins..(o + 1) * bins];
                    for i in 0..l.in_ch {
                        let gb = (o * l.in_ch + i) * bins;
                        mac_conj(&mut g[gb..gb + bins], &x_hat[i * bins..(i + 1) * bins], dh);
                    }
                }
                if idx > lowest {
                    let k = &self.spectra[idx];
                    let mut next = vec![0.0; l.in_ch * np];
                    let mut acc = vec![Complex64::default(); bins];
                    for i in 0..l.in_ch {
                        acc.fill(Complex64::default());
                        for o in 0..l.out_ch {
                            let kb = (o * l.in_ch + i) * bins;
                            mac_conj(&mut acc, &k[kb..kb + bins], &d_hat[o * bins..(o + 1) * bins]);
                        }
                        self.fft.inverse(&acc, &mut next[i * np..(i + 1) * np]);
                    }
                    delta = next;
                }
            }
        }

        let mut field = vec![0.0; np];
        for idx in lowest..n_layers {
            let l = &model.layers[idx];
            for pair in 0..l.out_ch * l.in_ch {
                self.fft
                    .inverse(&spec_grads[idx][pair * bins..(pair + 1) * bins], &mut field);
                extract_taps(
                    &field,
                    n,
                    &mut grads.layers[idx].weights[pair * KERNEL_TAPS..(pair + 1) * KERNEL_TAPS],
                );
            }
        }
        (loss * scale, grads)
    }
}

/// Batch-mean squared error in normalized target space and exact gradients for every
/// parameter. Inputs and targets must already be normalized.
pub fn loss_and_gradients_normalized(
    model: &CnnModel,
    inputs: &[&[f64]],
    targets: &[&[f64]],
) -> Result<(f64, Gradients)> {
    check_batch(model, inputs, targets)?;
    let engine = Engine::new(model)?;
    let (loss, g) = engine.loss_and_gradients(model, inputs, targets, 0);
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged { epoch: 0 });
    }
    Ok((loss, g))
}

/// As [`loss_and_gradients_normalized`] for physical-unit records, normalized with the
/// model's statistics.
pub fn loss_and_gradients(model: &CnnModel, batch: &[&SampleRecord]) -> Result<(f64, Gradients)> {
    let xs: Vec<Vec<f64>> = batch.iter().map(|r| model.normalize_input(&r.inputs)).collect();
    let ts: Vec<Vec<f64>> = batch.iter().map(|r| model.normalize_target(&r.targets)).collect();
    let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let tr: Vec<&[f64]> = ts.iter().map(Vec::as_slice).collect();
    loss_and_gradients_normalized(model, &xr, &tr)
}

pub(crate) fn check_batch(model: &CnnModel, inputs: &[&[f64]], targets: &[&[f64]]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::shape(inputs.len(), targets.len()));
    }
    let np = model.n * model.n;
    for (x, t) in inputs.iter().zip(targets) {
        if x.len() != model.in_ch() * np {
            return Err(Error::shape(model.in_ch() * np, x.len()));
        }
        if t.len() != model.out_ch() * np {
            return Err(Error::shape(model.out_ch() * np, t.len()));
        }
    }
    Ok(())
}
