use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use qgtl_core::cnn::{CnnModel, ConvLayer};
use qgtl_core::dataset::{ChannelStats, Dataset, Provenance, SampleRecord};
use qgtl_core::fft::half_len;
use qgtl_core::metrics::*;
use qgtl_core::qg::{random_initial_condition, run_simulation, ModelParams, QgModel, SpectralState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(nx: usize) -> ModelParams {
    ModelParams::from_deformation_radius(
        1e6, nx, 500.0, 2000.0, 1e-4, 1.5e-11, 15_000.0, 5.787e-7, 0.025, 0.0, 3600.0, "eddy",
    )
    .unwrap()
}

fn fields(count: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..len).map(|_| rng.random::<f64>() - 0.3).collect()).collect()
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

fn zero_closure_model(n: usize, bias: f64) -> CnnModel {
    let mut first = ConvLayer::zeros(4, 3);
    first.weights[0] = 0.0;
    let mut last = ConvLayer::zeros(3, 2);
    last.bias = vec![bias; 2];
    CnnModel {
        n,
        layers: vec![first, last],
        norm: ChannelStats::identity(4, 2),
    }
}

#[test]
fn rmse_scales_with_relative_error() {
    let t = fields(5, 64, 1);
    let p: Vec<Vec<f64>> = t.iter().map(|f| f.iter().map(|v| 1.5 * v).collect()).collect();
    assert!((rmse(&refs(&p), &refs(&t)).unwrap() - 0.5).abs() < 1e-14);
    let q: Vec<Vec<f64>> = t.iter().map(|f| f.iter().map(|v| 0.25 * v).collect()).collect();
    assert!((rmse(&refs(&q), &refs(&t)).unwrap() - 0.75).abs() < 1e-14);
    assert!(rmse(&[], &[]).is_err());
    assert!(rmse(&refs(&p[..2]), &refs(&t)).is_err());
}

#[test]
fn correlation_anchors() {
    let t = fields(4, 100, 2);
    let neg: Vec<Vec<f64>> = t.iter().map(|f| f.iter().map(|v| -v).collect()).collect();
    let aff: Vec<Vec<f64>> = t.iter().map(|f| f.iter().map(|v| 3.0 * v + 7.0).collect()).collect();
    assert!((cc(&refs(&t), &refs(&t)).unwrap() - 1.0).abs() < 1e-14);
    assert!((cc(&refs(&neg), &refs(&t)).unwrap() + 1.0).abs() < 1e-14);
    assert!((cc(&refs(&aff), &refs(&t)).unwrap() - 1.0).abs() < 1e-14);
    // rmse does see the affine change
    assert!(rmse(&refs(&aff), &refs(&t)).unwrap() > 1.0);
    let flat = vec![vec![1.0; 100]];
    assert!(cc(&refs(&flat), &refs(&t[..1])).is_err());
}

#[test]
fn spectrum_error_anchors() {
    let n = 8;
    let t = fields(3, n * n, 3);
    assert_eq!(spectrum_rmse(&refs(&t), &refs(&t), n).unwrap().value, 0.0);
    let p: Vec<Vec<f64>> = t.iter().map(|f| f.iter().map(|v| v * 2f64.sqrt()).collect()).collect();
    assert!((spectrum_rmse(&refs(&p), &refs(&t), n).unwrap().value - 1.0).abs() < 1e-13);
    let e = spectrum_rmse_from_spectra(&[1.0, 1.0, 5.0], &[1.0, 2.0, 4.0]).unwrap();
    assert_eq!(e.value, 0.25);
}

#[test]
fn offline_report_on_exact_model() {
    let n = 8;
    let np = n * n;
    let records: Vec<SampleRecord> = (0..3)
        .map(|s| {
            let mut targets = vec![0.0; 2 * np];
            for (i, t) in targets.iter_mut().enumerate() {
                *t = if i < np { ((i % n) as f64 * 0.9).sin() } else { ((i / n) as f64 * 0.4).cos() };
            }
            SampleRecord {
                inputs: fields(1, 4 * np, s)[0].clone(),
                targets,
                provenance: Provenance {
                    case_label: "t".into(),
                    member: 0,
                    seed: s,
                    time: 0.0,
                },
            }
        })
        .collect();
    let data = Dataset {
        n,
        case_label: "t".into(),
        records,
        config_hash: [0; 32],
    };
    // center taps copy input channels 0 and 2 onto the outputs
    let mut copy = ConvLayer::zeros(4, 2);
    copy.weights[12] = 1.0;
    copy.weights[(4 + 2) * 25 + 12] = 1.0;
    let mut model = CnnModel {
        n,
        layers: vec![copy],
        norm: ChannelStats::identity(4, 2),
    };
    let exact: Vec<SampleRecord> = data
        .records
        .iter()
        .map(|r| {
            let mut e = r.clone();
            e.targets = [&r.inputs[..np], &r.inputs[2 * np..3 * np]].concat();
            e
        })
        .collect();
    let exact = Dataset {
        records: exact,
        ..data.clone()
    };
    let r = evaluate_offline(&model, &exact, "copy").unwrap();
    assert_eq!(r.n_samples, 3);
    assert_eq!(r.layers.len(), 2);
    assert!(r.layers.iter().all(|l| l.rmse < 1e-13 && (l.cc - 1.0).abs() < 1e-13 && l.spectrum_rmse < 1e-12));
    assert!(r.summary().contains("samples = 3"));
    assert_eq!(r.to_csv().lines().count(), 3);
    let r = evaluate_offline(&model, &data, "copy").unwrap();
    assert!(r.layers.iter().all(|l| l.rmse > 0.1 && l.cc < 0.9));
    // a constant prediction has no variance to correlate
    model.layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
    assert!(evaluate_offline(&model, &data, "zero").is_err());
}

#[test]
fn null_closure_reproduces_bare_solver() {
    let p = params(32);
    let ic = random_initial_condition(3, &p, 1e-5).unwrap();
    let bare = run_simulation(&p, ic.clone(), 40, 5).unwrap();
    let run = run_online(&mut NoClosure, &p, ic.clone(), 40, 5).unwrap();
    assert!(run.stable && run.diverged_at.is_none());
    assert_eq!(run.steps_run, 40);
    assert_eq!(run.trajectory.len(), bare.len());
    for (a, b) in run.trajectory.iter().zip(&bare) {
        for (x, y) in a.q_hat.iter().flatten().zip(b.q_hat.iter().flatten()) {
            assert_eq!(x.re.to_bits(), y.re.to_bits());
            assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
    }
    let model = zero_closure_model(32, 0.0);
    let mut closure = CnnClosure::new(&model).unwrap();
    let zero = run_online(&mut closure, &p, ic, 40, 5).unwrap();
    for (a, b) in zero.trajectory.iter().zip(&bare) {
        assert_eq!(a.q_hat, b.q_hat);
    }
}

#[test]
fn exploding_closure_is_flagged() {
    let p = params(16);
    let ic = random_initial_condition(3, &p, 1e-5).unwrap();
    let model = zero_closure_model(16, 1e300);
    let mut closure = CnnClosure::new(&model).unwrap();
    let run = run_online(&mut closure, &p, ic, 100, 1).unwrap();
    assert!(!run.stable);
    let at = run.diverged_at.unwrap();
    assert!((1..=100).contains(&at));
    assert_eq!(run.steps_run, at - 1);
    assert!(run.trajectory.iter().all(SpectralState::is_finite));
}

#[test]
fn closure_shape_is_checked() {
    let p = params(16);
    let ic = random_initial_condition(3, &p, 1e-5).unwrap();
    let model = zero_closure_model(8, 0.0);
    let mut closure = CnnClosure::new(&model).unwrap();
    assert!(run_online(&mut closure, &p, ic.clone(), 2, 1).is_err());
    assert!(run_online(&mut NoClosure, &p, SpectralState::zeros(8), 2, 1).is_err());
    assert!(run_online(&mut NoClosure, &p, ic, 2, 0).is_err());
    let bad = CnnModel {
        n: 16,
        layers: vec![ConvLayer::zeros(2, 2)],
        norm: ChannelStats::identity(2, 2),
    };
    assert!(CnnClosure::new(&bad).is_err());
}

#[test]
fn ke_spectrum_of_single_mode() {
    let n = 16;
    let p = params(n);
    let model = QgModel::new(&p).unwrap();
    let h = half_len(n);
    let (amp, k0) = (1e3, 3usize);
    // psi_1 = amp cos(2 pi k0 x / L): v_1 = -amp k sin(k x), u_1 = 0
    let mut psi = [vec![Complex64::default(); n * h], vec![Complex64::default(); n * h]];
    psi[0][k0] = Complex64::new(amp * (n * n) as f64 / 2.0, 0.0);
    let state = SpectralState {
        n,
        q_hat: model.pv_from_streamfunction(&psi),
        time: 0.0,
        step_index: 0,
    };
    let ke = ke_spectrum(&[state.clone()], &model, 0.0).unwrap();
    let kk = 2.0 * PI * k0 as f64 / p.l;
    let expect = amp * amp * kk * kk / 4.0;
    for (k, v) in ke[0].power.iter().enumerate() {
        if k == k0 {
            assert!((v - expect).abs() < 1e-10 * expect, "{v} vs {expect}");
        } else {
            assert!(v.abs() < 1e-12 * expect);
        }
    }
    assert!(ke[1].power.iter().all(|v| v.abs() < 1e-12 * expect));
    let repeated = ke_spectrum(&vec![state; 5], &model, DISCARD_FRACTION).unwrap();
    for (a, b) in repeated[0].power.iter().zip(&ke[0].power) {
        assert!((a - b).abs() <= 1e-14 * expect);
    }
    let zero = ke_spectrum(&[SpectralState::zeros(n)], &model, 0.0).unwrap();
    assert!(zero.iter().all(|s| s.total() == 0.0));
    assert!(ke_spectrum(&[], &model, 0.1).is_err());
}

#[test]
fn pdf_of_constant_field() {
    let p = histogram_pdf(&[0.3; 50], 11, -1.0, 1.0).unwrap();
    let width = 2.0 / 11.0;
    let occupied: Vec<usize> = (0..11).filter(|&i| p.density[i] > 0.0).collect();
    assert_eq!(occupied.len(), 1);
    assert!((p.density[occupied[0]] - 1.0 / width).abs() < 1e-12);
    assert!(sigma_range(&[0.3; 5], 5.0).is_err());
}

#[test]
fn pdf_of_symmetric_field_is_symmetric() {
    let n = 32;
    let p = params(n);
    let model = QgModel::new(&p).unwrap();
    let q1: Vec<f64> = (0..n * n)
        .map(|i| (PI * (2 * (i % n) + 1) as f64 / n as f64).sin() * 1e-5)
        .collect();
    let state = SpectralState::from_physical(model.fft(), &[q1.clone(), vec![0.0; n * n]]);
    let pdf = pv_pdf(&[state], &model, 20, (-2e-5, 2e-5)).unwrap();
    for i in 0..10 {
        assert!((pdf.density[i] - pdf.density[19 - i]).abs() <= 1e-6 * pdf.density.iter().cloned().fold(0.0, f64::max));
    }
    assert!((pdf.integral() - 1.0).abs() < 1e-12);
}

#[test]
fn trained_style_closure_runs_on_live_state() {
    // small random network: the run either completes or is flagged, never errors
    let n = 16;
    let p = params(n);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = zero_closure_model(n, 0.0);
    for l in &mut model.layers {
        l.weights.iter_mut().for_each(|w| *w = (rng.random::<f64>() - 0.5) * 1e-3);
    }
    model.norm.input_std = vec![0.01; 4];
    model.norm.target_std = vec![1e-12; 2];
    let ic = random_initial_condition(8, &p, 1e-5).unwrap();
    let mut closure = CnnClosure::new(&model).unwrap();
    let run = run_online(&mut closure, &p, ic, 50, 10).unwrap();
    let report = OnlineReport::from_run(&run, &p, 21, (-1e-4, 1e-4)).unwrap();
    assert_eq!(report.stable, run.stable);
    assert!(report.ke.iter().all(|s| s.power.iter().all(|v| *v >= 0.0)));
    assert!(report.summary().contains("stable = "));
}

proptest! {
    #[test]
    fn pdf_integrates_to_one(seed in 0u64..500, bins in 2usize..200) {
        let v = &fields(1, 300, seed)[0];
        let (lo, hi) = sigma_range(v, 5.0).unwrap();
        let p = histogram_pdf(v, bins, lo, hi).unwrap();
        prop_assert!((p.integral() - 1.0).abs() < 1e-9);
        prop_assert_eq!(p.dropped, 0);
    }

    #[test]
    fn metrics_are_permutation_invariant(seed in 0u64..200) {
        let n = 8;
        let t = fields(4, n * n, seed);
        let p = fields(4, n * n, seed + 1000);
        let order = [2usize, 0, 3, 1];
        let tp: Vec<Vec<f64>> = order.iter().map(|&i| t[i].clone()).collect();
        let pp: Vec<Vec<f64>> = order.iter().map(|&i| p[i].clone()).collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        prop_assert!(close(rmse(&refs(&p), &refs(&t)).unwrap(), rmse(&refs(&pp), &refs(&tp)).unwrap()));
        prop_assert!(close(cc(&refs(&p), &refs(&t)).unwrap(), cc(&refs(&pp), &refs(&tp)).unwrap()));
        prop_assert!(close(
            spectrum_rmse(&refs(&p), &refs(&t), n).unwrap().value,
            spectrum_rmse(&refs(&pp), &refs(&tp), n).unwrap().value
        ));
        let c = cc(&refs(&p), &refs(&t)).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }
}
