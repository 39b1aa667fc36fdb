use std::f64::consts::PI;

use num_complex::Complex64;
use qgtl_core::cnn::{
    checkpoint_container, conv2d_periodic, loss_and_gradients_normalized, pad_kernel, train_bnn, transfer_learn,
    Arch, CnnModel, TlConfig, TrainConfig, KERNEL_TAPS,
};
use qgtl_core::dataset::{Dataset, Provenance, SampleRecord};
use qgtl_core::explain::{compare_maxima, kernel_maxima, kmeans, maxima_histogram, KMeansConfig};
use qgtl_core::fft::{fft2, half_len, ifft2_full, signed_index, Fft2};
use qgtl_core::filtering::{
    coarse_grain, filter_and_coarsen, gaussian_filter, gaussian_gain, subgrid_forcing_hat, CoarsenSpec, Coarsener,
};
use qgtl_core::metrics::{cc, rmse, spectrum_rmse, spectrum_rmse_from_spectra};
use qgtl_core::qg::{
    random_initial_condition, resolution_ratio, ssd_gain, AbHistory, ModelParams, QgModel, SpectralState,
    SSD_CUTOFF,
};
use qgtl_core::seed;
use qgtl_core::specanalysis::{relu_spectral_decomposition, relu_support};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

type R = Result<Outcome, String>;

const L: f64 = 1e6;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn eddy(nx: usize) -> ModelParams {
    ModelParams::from_deformation_radius(
        L, nx, 500.0, 2000.0, 1e-4, 1.5e-11, 15_000.0, 5.787e-7, 0.025, 0.0, 3600.0, "case0",
    )
    .unwrap()
}

fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

fn noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random::<f64>() - 0.5).collect()
}

/// Random field keeping only |k|, |l| <= kmax, without the mean.
fn band_limited(fft: &Fft2, kmax: i64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = fft.n();
    let h = half_len(n);
    let mut spec = fft.forward_vec(&noise(n * n, rng));
    for j in 0..n {
        let l = signed_index(j, n);
        for i in 0..h {
            if l.abs() > kmax || i as i64 > kmax || (i == 0 && l == 0) {
                spec[j * h + i] = Complex64::default();
            }
        }
    }
    fft.inverse_vec(&spec)
}

pub fn solver() -> R {
    let p = eddy(64);
    let model = QgModel::new(&p).map_err(err)?;
    let fft = model.fft();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut inversion = 0.0f64;
    for _ in 0..4 {
        let q = [0, 1].map(|_| fft.forward_vec(&band_limited(fft, 31, &mut rng)));
        let back = model.pv_from_streamfunction(&model.invert_pv(&q));
        for m in 0..2 {
            inversion = inversion.max(rel_err(&back[m], &q[m]));
        }
    }

    let mut jac = 0.0f64;
    for _ in 0..3 {
        let psi = band_limited(fft, 10, &mut rng);
        let q = band_limited(fft, 10, &mut rng);
        let j = fft.inverse_vec(&model.jacobian(&fft.forward_vec(&psi), &fft.forward_vec(&q)).map_err(err)?);
        let ratio = |w: &dyn Fn(usize) -> f64| {
            let s: f64 = (0..j.len()).map(|i| w(i) * j[i]).sum();
            let a: f64 = (0..j.len()).map(|i| (w(i) * j[i]).abs()).sum();
            (s / a).abs()
        };
        jac = jac.max(ratio(&|_| 1.0)).max(ratio(&|i| psi[i])).max(ratio(&|i| q[i]));
    }

    let errs: Vec<f64> = [1.0e5, 5.0e4, 2.5e4].iter().map(|&dt| LinearProblem::new(dt).integrate(4.0e6)).collect();
    let order = errs.windows(2).map(|w| (w[0] / w[1]).log2()).fold(f64::INFINITY, f64::min);

    Ok(Outcome::new(
        inversion <= 1e-10 && jac <= 1e-6 && order >= 2.7,
        format!("inversion {inversion:.1e} (<= 1e-10), jacobian sums {jac:.1e} (<= 1e-6), AB3 order {order:.2} (>= 2.7)"),
    ))
}

/// Linear two-layer problem on a single Fourier mode with an exact matrix-exponential solution.
struct LinearProblem {
    params: ModelParams,
    idx: usize,
    q0: [Complex64; 2],
    generator: [[Complex64; 2]; 2],
}

type M2 = [[Complex64; 2]; 2];

fn mul2(x: M2, y: M2) -> M2 {
    let mut z = [[Complex64::default(); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            z[r][c] = x[r][0] * y[0][c] + x[r][1] * y[1][c];
        }
    }
    z
}

fn expm2(a: M2, t: f64) -> M2 {
    let norm = a.iter().flatten().map(|c| c.norm()).sum::<f64>() * t.abs();
    let squarings = (norm.max(1.0).log2().ceil() as i32 + 4).max(0);
    let b = a.map(|r| r.map(|c| c * (t / 2f64.powi(squarings))));
    let one = Complex64::new(1.0, 0.0);
    let mut result = [[one, Complex64::default()], [Complex64::default(), one]];
    let mut term = result;
    for k in 1..30 {
        term = mul2(term, b).map(|r| r.map(|c| c / k as f64));
        for r in 0..2 {
            for c in 0..2 {
                result[r][c] += term[r][c];
            }
        }
    }
    for _ in 0..squarings {
        result = mul2(result, result);
    }
    result
}

impl LinearProblem {
    fn new(dt: f64) -> Self {
        let mut p = eddy(32);
        p.beta = 0.0;
        p.r_ek = 0.0;
        p.u1 = 0.05;
        p.u2 = 0.01;
        p.dt = dt;
        let (i, j) = (3, 2);
        let idx = j * half_len(32) + i;
        let dk = 2.0 * PI / p.l;
        let (k, l) = (dk * i as f64, dk * j as f64);
        let k2 = k * k + l * l;
        let (f1, f2) = (p.stretching(0), p.stretching(1));
        let det = k2 * (k2 + f1 + f2);
        let inv = [[-(f2 + k2) / det, -f1 / det], [-f2 / det, -(f1 + k2) / det]];
        let ik = Complex64::new(0.0, k);
        let betas = [p.beta_m(0), p.beta_m(1)];
        let us = [p.u1, p.u2];
        let mut g = [[Complex64::default(); 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                g[r][c] = -ik * betas[r] * inv[r][c];
            }
            g[r][r] -= ik * us[r];
        }
        LinearProblem {
            params: p,
            idx,
            q0: [Complex64::new(1e-6, 0.5e-6), Complex64::new(-0.3e-6, 0.2e-6)],
            generator: g,
        }
    }

    fn exact(&self, t: f64) -> [Complex64; 2] {
        let e = expm2(self.generator, t);
        [e[0][0] * self.q0[0] + e[0][1] * self.q0[1], e[1][0] * self.q0[0] + e[1][1] * self.q0[1]]
    }

    fn state(&self, t: f64) -> SpectralState {
        let mut s = SpectralState::zeros(32);
        let q = self.exact(t);
        s.q_hat[0][self.idx] = q[0];
        s.q_hat[1][self.idx] = q[1];
        s.time = t;
        s
    }

    fn integrate(&self, t_end: f64) -> f64 {
        let model = QgModel::new(&self.params).unwrap().linear_only();
        let dt = self.params.dt;
        let mut hist = AbHistory::default();
        hist.push(model.tendency(&self.state(-2.0 * dt)).unwrap());
        hist.push(model.tendency(&self.state(-dt)).unwrap());
        let mut s = self.state(0.0);
        for _ in 0..(t_end / dt).round() as u64 {
            model.step(&mut s, &mut hist).unwrap();
        }
        let e = self.exact(t_end);
        let d = ((s.q_hat[0][self.idx] - e[0]).norm_sqr() + (s.q_hat[1][self.idx] - e[1]).norm_sqr()).sqrt();
        d / (e[0].norm_sqr() + e[1].norm_sqr()).sqrt()
    }
}

pub fn resolution() -> R {
    let hi = resolution_ratio(20_000.0, L, 256);
    let lo = resolution_ratio(20_000.0, L, 64);
    let pass = hi == (3906.25, 5.12) && lo == (15_625.0, 1.28) && hi.1 > 2.0 && lo.1 < 2.0;
    Ok(Outcome::new(
        pass,
        format!("nx=256: dx {} m, rd/dx {}; nx=64: dx {} m, rd/dx {} (exact)", hi.0, hi.1, lo.0, lo.1),
    ))
}

pub fn filters() -> R {
    let edge = [SSD_CUTOFF * (1.0 - 1e-9), SSD_CUTOFF, SSD_CUTOFF * (1.0 + 1e-9)]
        .iter()
        .map(|&k| ssd_gain(k).map(|g| (1.0 - g).abs()))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(err)?;
    let continuity = edge.iter().cloned().fold(0.0, f64::max);
    let dc = gaussian_gain(0.0, 15_625.0);

    let spec = CoarsenSpec::new(128, 4, L).map_err(err)?;
    let fft = Fft2::new(128);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut commute = 0.0f64;
    for _ in 0..3 {
        let f = fft.forward_vec(&noise(128 * 128, &mut rng));
        let a = filter_and_coarsen(&f, &spec).map_err(err)?;
        let b = coarse_grain(&gaussian_filter(&f, 128, L, spec.dx_lo), &spec).map_err(err)?;
        commute = commute.max(rel_err(&a, &b));
    }
    Ok(Outcome::new(
        continuity <= 1e-15 && dc == 1.0 && commute <= 1e-12,
        format!("|1 - ssd gain| at cutoff {continuity:.1e} (<= 1e-15), gaussian DC gain {dc}, commutation {commute:.1e} (<= 1e-12)"),
    ))
}

/// A spun-up state with energy at every resolved scale.
fn turbulent_state(p: &ModelParams, seed: u64) -> Result<SpectralState, String> {
    let model = QgModel::new(p).map_err(err)?;
    let mut s = random_initial_condition(seed, p, 2e-6).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in 0..2 {
        let hat = model.fft().forward_vec(&noise(p.nx * p.nx, &mut rng));
        for (q, e) in s.q_hat[m].iter_mut().zip(hat) {
            *q += e * 2e-7;
        }
    }
    let mut hist = AbHistory::default();
    for _ in 0..50 {
        model.step(&mut s, &mut hist).map_err(err)?;
    }
    s.time = 0.0;
    s.step_index = 0;
    Ok(s)
}

pub fn forcing() -> R {
    let p = eddy(32);
    let m32 = QgModel::new(&p).map_err(err)?;
    let identity = Coarsener::new(CoarsenSpec::new(32, 1, L).map_err(err)?.without_filter());
    let pi = subgrid_forcing_hat(&turbulent_state(&p, 2)?, &m32, &m32, &identity).map_err(err)?;
    let zero = pi.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);

    let (hi_p, lo_p) = (eddy(128), eddy(32));
    let hi = QgModel::new(&hi_p).map_err(err)?;
    let lo = QgModel::new(&lo_p).map_err(err)?;
    let c = Coarsener::new(CoarsenSpec::new(128, 4, L).map_err(err)?);
    let mut oracle_err = 0.0f64;
    for seed in [5, 6] {
        let s = turbulent_state(&hi_p, seed)?;
        let pi = subgrid_forcing_hat(&s, &hi, &lo, &c).map_err(err)?;
        let mut s_hi = s.clone();
        hi.step(&mut s_hi, &mut AbHistory::default()).map_err(err)?;
        let mut s_lo = c.apply_state(&s).map_err(err)?;
        lo.step(&mut s_lo, &mut AbHistory::default()).map_err(err)?;
        let next = c.apply_state(&s_hi).map_err(err)?;
        for m in 0..2 {
            let oracle: Vec<Complex64> =
                next.q_hat[m].iter().zip(&s_lo.q_hat[m]).map(|(a, b)| (a - b) / hi_p.dt).collect();
            oracle_err = oracle_err.max(rel_err(&pi[m], &oracle));
        }
    }
    Ok(Outcome::new(
        zero <= 1e-12 && oracle_err <= 1e-8,
        format!("identity-filter forcing {zero:.1e} (<= 1e-12), step-and-subtract 128->32 {oracle_err:.1e} (<= 1e-8)"),
    ))
}

fn tiny_model(seed: u64) -> Result<CnnModel, String> {
    let arch = Arch {
        n: 8,
        in_ch: 2,
        hidden: 2,
        out_ch: 2,
        n_layers: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = CnnModel::new(arch, &mut rng).map_err(err)?;
    for l in &mut m.layers {
        for b in &mut l.bias {
            *b = rng.random::<f64>() * 0.4 - 0.1;
        }
    }
    Ok(m)
}

fn param(m: &mut CnnModel, layer: usize, bias: bool, j: usize) -> &mut f64 {
    if bias {
        &mut m.layers[layer].bias[j]
    } else {
        &mut m.layers[layer].weights[j]
    }
}

pub fn gradients() -> R {
    let model = tiny_model(11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| noise(128, &mut rng)).collect();
    let ts: Vec<Vec<f64>> = (0..3).map(|_| noise(128, &mut rng)).collect();
    let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let tr: Vec<&[f64]> = ts.iter().map(Vec::as_slice).collect();
    let (_, grads) = loss_and_gradients_normalized(&model, &xr, &tr).map_err(err)?;
    let loss = |m: &CnnModel| loss_and_gradients_normalized(m, &xr, &tr).map(|r| r.0).map_err(err);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut count = 0;
    for li in 0..model.layers.len() {
        for bias in [false, true] {
            let len = if bias { model.layers[li].bias.len() } else { model.layers[li].weights.len() };
            for j in 0..len {
                let (mut plus, mut minus) = (model.clone(), model.clone());
                *param(&mut plus, li, bias, j) += h;
                *param(&mut minus, li, bias, j) -= h;
                let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
                let g = if bias { grads.layers[li].bias[j] } else { grads.layers[li].weights[j] };
                worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
                count += 1;
            }
        }
    }
    Ok(Outcome::new(worst < 1e-5, format!("{count} parameters, worst relative error {worst:.1e} (< 1e-5)")))
}

pub fn spectral() -> R {
    let n = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = noise(KERNEL_TAPS, &mut rng);
    let x = noise(n * n, &mut rng);
    let direct = conv2d_periodic(&w, &[0.0], &x, 1, 1, n).map_err(err)?;
    let kh = fft2(&pad_kernel(&w, n).map_err(err)?, n);
    let prod: Vec<Complex64> = kh.iter().zip(fft2(&x, n)).map(|(a, b)| a * b).collect();
    let via = ifft2_full(&prod, n);
    let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let conv = direct.iter().zip(&via).map(|(a, b)| (a - b.re).abs().max(b.im.abs())).fold(0.0, f64::max) / scale;

    let n = 8;
    let h = noise(n * n, &mut rng);
    let support = relu_support(&h, n);
    let h_hat = fft2(&h, n);
    let mut mask = vec![Complex64::default(); n * n];
    for ky in 0..n {
        for kx in 0..n {
            for &(y, x) in &support {
                mask[ky * n + kx] += Complex64::from_polar(1.0, -2.0 * PI * ((kx * x + ky * y) as f64) / n as f64);
            }
        }
    }
    let got = relu_spectral_decomposition(&h, n).map_err(err)?;
    let direct = fft2(&h.iter().map(|v| v.max(0.0)).collect::<Vec<_>>(), n);
    let mut relu = 0.0f64;
    for ky in 0..n {
        for kx in 0..n {
            let mut acc = Complex64::default();
            for py in 0..n {
                for px in 0..n {
                    acc += mask[py * n + px] * h_hat[((ky + n - py) % n) * n + (kx + n - px) % n];
                }
            }
            let i = ky * n + kx;
            relu = relu.max((got[i] - acc / (n * n) as f64).norm()).max((got[i] - direct[i]).norm());
        }
    }
    Ok(Outcome::new(
        conv <= 1e-10 && relu <= 1e-10,
        format!("convolution theorem {conv:.1e} (<= 1e-10), ReLU decomposition vs direct and sum-over-support at 8x8 {relu:.1e} (<= 1e-10)"),
    ))
}

fn synthetic(n: usize, count: usize, seed: u64, gain: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let np = n * n;
    let records = (0..count)
        .map(|s| {
            let inputs = noise(4 * np, &mut rng);
            let mut targets = vec![0.0; 2 * np];
            for i in 0..np {
                targets[i] = gain * inputs[i] * inputs[np + i];
                targets[np + i] = gain * (inputs[2 * np + i] - 0.5 * inputs[3 * np + i]);
            }
            SampleRecord {
                inputs,
                targets,
                provenance: Provenance {
                    case_label: "synthetic".into(),
                    member: 0,
                    seed,
                    time: s as f64,
                },
            }
        })
        .collect();
    Dataset {
        n,
        case_label: "synthetic".into(),
        records,
        config_hash: [0; 32],
    }
}

pub fn transfer() -> R {
    let arch = Arch {
        n: 8,
        in_ch: 4,
        hidden: 4,
        out_ch: 2,
        n_layers: 4,
    };
    let cfg = |epochs, seed| TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let base = train_bnn(&synthetic(8, 24, 6, 1.0), arch, &cfg(3, 1)).map_err(err)?.model;
    let target = synthetic(8, 40, 7, 3.0);
    let mut tl = TlConfig {
        train: cfg(3, 2),
        trainable_layers: vec![2],
        data_fraction: 0.5,
        refit_norm: false,
    };
    let out = transfer_learn(&base, &target, &tl).map_err(err)?.model;
    let bits = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits());
    let frozen = base
        .layers
        .iter()
        .zip(&out.layers)
        .enumerate()
        .filter(|(i, _)| *i != 1)
        .all(|(_, (a, b))| bits(&a.weights, &b.weights) && bits(&a.bias, &b.bias));
    let moved = base.layers[1].weights != out.layers[1].weights;

    tl.data_fraction = 0.0;
    let noop = transfer_learn(&base, &target, &tl).map_err(err)?.model;
    let bytes = |m: &CnnModel| checkpoint_container(m, None, [3; 32]).map(|c| c.to_bytes()).map_err(err);
    let identical = bytes(&noop)? == bytes(&base)?;
    Ok(Outcome::new(
        frozen && moved && identical,
        format!("frozen layers bit-identical: {frozen}, retrained layer changed: {moved}, fraction-0 checkpoint byte-identical: {identical}"),
    ))
}

pub fn explainability() -> R {
    let pts = [[0.0, 0.0], [1.0, 0.2], [0.3, 1.1], [5.0, 5.0], [6.1, 4.7], [5.4, 6.2]];
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << 6) - 1 {
        let mut inertia = 0.0;
        for side in [true, false] {
            let members: Vec<&[f64; 2]> = (0..6).filter(|i| (mask >> i & 1 == 1) == side).map(|i| &pts[i]).collect();
            let c = [0, 1].map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64);
            inertia += members.iter().map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sum::<f64>();
        }
        best = best.min(inertia);
    }
    let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
    let mut gap = 0.0f64;
    for s in 0..5 {
        gap = gap.max((kmeans(&refs, &KMeansConfig::new(2, s)).map_err(err)?.inertia - best).abs());
    }

    let model = CnnModel::new(Arch::closure(32, 16), &mut seed::rng(1, "acceptance")).map_err(err)?;
    let maxima = kernel_maxima(&model, 2).map_err(err)?;
    let same = compare_maxima(&maxima, &maxima).map_err(err)?;
    let identity = same.shifted.is_empty() && same.mean_ratio() == Some(1.0);
    let kernels = 16 * 16;
    let signed = maxima_histogram(&maxima, false).map_err(err)?.total();
    let folded = maxima_histogram(&maxima, true).map_err(err)?.total();
    Ok(Outcome::new(
        gap <= 1e-12 && identity && signed == kernels && folded == kernels,
        format!(
            "k-means gap to exhaustive optimum {gap:.1e}, identity comparison shifted {} ratio {:?}, histogram totals {signed}/{folded} of {kernels}",
            same.shifted.len(),
            same.mean_ratio()
        ),
    ))
}

pub fn metric_anchors() -> R {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t: Vec<Vec<f64>> = (0..3).map(|_| noise(n * n, &mut rng)).collect();
    let tr: Vec<&[f64]> = t.iter().map(Vec::as_slice).collect();
    let zeros = vec![vec![0.0; n * n]; 3];
    let zr: Vec<&[f64]> = zeros.iter().map(Vec::as_slice).collect();
    let root2: Vec<Vec<f64>> = t.iter().map(|f| f.iter().map(|v| v * 2f64.sqrt()).collect()).collect();
    let r2: Vec<&[f64]> = root2.iter().map(Vec::as_slice).collect();
    let checks = [
        ("rmse(t, t)", rmse(&tr, &tr).map_err(err)?, 0.0),
        ("rmse(0, t)", rmse(&zr, &tr).map_err(err)?, 1.0),
        ("cc(t, t)", cc(&tr, &tr).map_err(err)?, 1.0),
        ("spectrum_rmse(t, t)", spectrum_rmse(&tr, &tr, n).map_err(err)?.value, 0.0),
        ("spectrum_rmse(sqrt2 t, t)", spectrum_rmse(&r2, &tr, n).map_err(err)?.value, 1.0),
        ("three-bin case", spectrum_rmse_from_spectra(&[1.0, 1.0, 5.0], &[1.0, 2.0, 4.0]).map_err(err)?.value, 0.25),
    ];
    let worst = checks.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let list: Vec<String> = checks.iter().map(|(name, got, _)| format!("{name} = {got}")).collect();
    Ok(Outcome::new(worst <= 1e-12, format!("{} (tolerance 1e-12)", list.join(", "))))
}
