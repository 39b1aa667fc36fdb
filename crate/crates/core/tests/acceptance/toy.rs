use std::path::PathBuf;
use std::sync::OnceLock;

use qgtl_core::cnn::{load_checkpoint, save_checkpoint, train_bnn, transfer_learn, Arch, CnnModel};
use qgtl_core::config::{ExperimentConfig, Scale};
use qgtl_core::container::hex;
use qgtl_core::dataset::{generate_dataset, Dataset};
use qgtl_core::filtering::{CoarsenSpec, Coarsener};
use qgtl_core::metrics::{
    evaluate_offline, filtered_reference, ke_error, ke_spectrum, run_online, CnnClosure, NoClosure, DISCARD_FRACTION,
};
use qgtl_core::qg::{random_initial_condition, run_simulation, QgModel};
use qgtl_core::seed;
use qgtl_core::specanalysis::activation_spectra;

use crate::Outcome;

type R = Result<Outcome, String>;

const SEEDS: u64 = 5;
const REQUIRED: usize = 4;
const BASE: &str = "case0";
const TARGET: &str = "case2";

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn config() -> &'static ExperimentConfig {
    static CFG: OnceLock<ExperimentConfig> = OnceLock::new();
    CFG.get_or_init(|| {
        let mut c = ExperimentConfig::builtin();
        c.experiment.scale = Scale::Toy;
        c
    })
}

/// Artifact directory: the cache when one is configured, otherwise a scratch directory.
fn store() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let root = std::env::var_os("QGTL_ACCEPTANCE_CACHE")
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join(format!("qgtl-acceptance-{}", std::process::id())));
        let dir = root.join(&hex(&config().hash())[..16]);
        std::fs::create_dir_all(&dir).expect("acceptance artifact directory");
        dir
    })
}

fn dataset(case: &str, split: &str) -> Result<Dataset, String> {
    let path = store().join(format!("{case}-{split}.qgsg"));
    if let Ok(d) = Dataset::read(&path) {
        return Ok(d);
    }
    let cfg = config();
    let c = cfg.case(case).map_err(err)?;
    let p = cfg.profile(Scale::Toy);
    let n = if split == "train" { p.n_samples } else { p.test_samples };
    let spec = cfg.dataset_spec(c, Scale::Toy, n);
    let root = seed::derive(cfg.experiment.seed, &format!("datagen/{case}/{split}"));
    let d = generate_dataset(c, &spec, root, 1).map_err(err)?;
    d.write(&path).map_err(err)?;
    Ok(d)
}

fn cached(name: String, build: impl FnOnce() -> Result<CnnModel, String>) -> Result<CnnModel, String> {
    let path = store().join(format!("{name}.ckpt"));
    if let Ok((m, _)) = load_checkpoint(&path) {
        return Ok(m);
    }
    let m = build()?;
    save_checkpoint(&path, &m, None, config().hash()).map_err(err)?;
    Ok(m)
}

fn run_seed(s: u64) -> u64 {
    seed::derive(config().experiment.seed, &format!("acceptance/{s}"))
}

fn bnn(case: &str, s: u64) -> Result<CnnModel, String> {
    cached(format!("bnn-{case}-{s}"), || {
        let data = dataset(case, "train")?;
        let cfg = config();
        let p = cfg.profile(Scale::Toy);
        let t = train_bnn(&data, Arch::closure(data.n, p.hidden_channels), &cfg.train_config(run_seed(s), p.epochs))
            .map_err(err)?;
        Ok(t.model)
    })
}

fn tlnn(s: u64) -> Result<CnnModel, String> {
    let base = bnn(BASE, s)?;
    cached(format!("tl-{BASE}-{TARGET}-{s}"), || {
        let data = dataset(TARGET, "train")?;
        let cfg = config();
        let tl = cfg.tl_config(run_seed(s), cfg.profile(Scale::Toy).epochs);
        Ok(transfer_learn(&base, &data, &tl).map_err(err)?.model)
    })
}

/// Mean spectrum_rmse over the output layers.
fn spectrum_rmse(model: &CnnModel, test: &Dataset) -> Result<f64, String> {
    let report = evaluate_offline(model, test, "acceptance").map_err(err)?;
    Ok(report.layers.iter().map(|l| l.spectrum_rmse).sum::<f64>() / report.layers.len() as f64)
}

/// Channel-averaged activation power of hidden layers 2 through 8.
fn activation_power(model: &CnnModel, data: &Dataset) -> Result<Vec<f64>, String> {
    let inputs: Vec<&[f64]> = data.records.iter().map(|r| r.inputs.as_slice()).collect();
    let hidden: Vec<usize> = (2..model.layers.len()).collect();
    let acts = activation_spectra(model, &inputs, &hidden).map_err(err)?;
    Ok(acts.iter().map(|a| a.total()).collect())
}

fn below(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x < y).count()
}

pub fn directional() -> R {
    let test = dataset(TARGET, "test")?;
    let base_test = dataset(BASE, "test")?;
    let (mut a, mut b, mut c) = (0, 0, 0);
    for s in 1..=SEEDS {
        let own_model = bnn(TARGET, s)?;
        let base_model = bnn(BASE, s)?;
        let own = spectrum_rmse(&own_model, &test)?;
        let base = spectrum_rmse(&base_model, &test)?;
        let tl = spectrum_rmse(&tlnn(s)?, &test)?;
        let out_of = activation_power(&base_model, &test)?;
        let within = activation_power(&base_model, &base_test)?;
        let under = below(&out_of, &within);
        let cross = below(&out_of, &activation_power(&own_model, &test)?);
        let hidden = out_of.len();
        let pa = own < base;
        let pb = own < tl && tl < base;
        let pc = 2 * under > hidden;
        a += pa as usize;
        b += pb as usize;
        c += pc as usize;
        println!(
            "    seed {s}: spectrum_rmse own {own:.4} tl {tl:.4} base {base:.4}; base activation power on {TARGET} below {BASE} on {under}/{hidden} hidden layers (below own network: {cross}/{hidden})"
        );
    }
    Ok(Outcome::new(
        a >= REQUIRED && b >= REQUIRED && c >= REQUIRED,
        format!(
            "{TARGET} test set, seeds passing of {SEEDS} (need {REQUIRED}): own < base {a}, own < tl < base {b}, base under-represents activation power {c}"
        ),
    ))
}

pub fn online() -> R {
    let cfg = config();
    let p = cfg.profile(Scale::Toy);
    let case = cfg.case(BASE).map_err(err)?;
    let p_hi = case.params(p.nx_hi).map_err(err)?;
    let p_lo = case.params(p.nx_lo()).map_err(err)?;
    let interval = cfg.eval.online_snapshot_interval;

    let ic = random_initial_condition(7, &p_lo, p.ic_amplitude).map_err(err)?;
    let solver = run_simulation(&p_lo, ic.clone(), 200, 10).map_err(err)?;
    let null = run_online(&mut NoClosure, &p_lo, ic, 200, 10).map_err(err)?;
    let bitwise = solver.len() == null.trajectory.len()
        && solver.iter().zip(&null.trajectory).all(|(x, y)| {
            (0..2).all(|m| x.q_hat[m].iter().zip(&y.q_hat[m]).all(|(u, v)| u.re.to_bits() == v.re.to_bits() && u.im.to_bits() == v.im.to_bits()))
        });

    let n_steps = (p.online_years * case.steps_per_year()).round() as u64;
    let spinup = (p.spinup_years * case.steps_per_year()).round() as u64;
    let coarsener = Coarsener::new(CoarsenSpec::new(p.nx_hi, p.factor, case.l).map_err(err)?);
    let ic_hi = random_initial_condition(
        seed::derive(cfg.experiment.seed, &format!("online/{BASE}")),
        &p_hi,
        p.ic_amplitude,
    )
    .map_err(err)?;
    let reference = filtered_reference(&p_hi, &coarsener, ic_hi, spinup, n_steps, interval).map_err(err)?;
    let lo = QgModel::new(&p_lo).map_err(err)?;
    let ref_ke = ke_spectrum(&reference.trajectory, &lo, DISCARD_FRACTION).map_err(err)?;
    let bare = run_online(&mut NoClosure, &p_lo, reference.ic_lo.clone(), n_steps, interval).map_err(err)?;
    let bare_err = ke_error(&ke_spectrum(&bare.trajectory, &lo, DISCARD_FRACTION).map_err(err)?, &ref_ke).map_err(err)?;

    let (mut stable, mut better) = (0, 0);
    for s in 1..=SEEDS {
        let model = bnn(BASE, s)?;
        let mut closure = CnnClosure::new(&model).map_err(err)?;
        let run = run_online(&mut closure, &p_lo, reference.ic_lo.clone(), n_steps, interval).map_err(err)?;
        let e = ke_error(&ke_spectrum(&run.trajectory, &lo, DISCARD_FRACTION).map_err(err)?, &ref_ke).map_err(err)?;
        stable += run.stable as usize;
        better += (run.stable && e < bare_err) as usize;
        println!(
            "    seed {s}: stable {} ({}/{} steps), KE spectrum error {e:.4} vs unparameterized {bare_err:.4}",
            run.stable, run.steps_run, n_steps
        );
    }
    Ok(Outcome::new(
        bitwise && stable >= REQUIRED && better >= REQUIRED,
        format!(
            "null closure bit-identical: {bitwise}; {BASE}, {n_steps} steps, seeds of {SEEDS} (need {REQUIRED}): stable {stable}, KE error below unparameterized {better}"
        ),
    ))
}
