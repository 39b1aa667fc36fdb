use std::fmt::Write as _;
use std::path::Path;

use qgtl_core::cnn::{checkpoint_container, model_from_container, train_bnn, transfer_learn, Arch, CnnModel};
use qgtl_core::container::{Tensor, TensorContainer};
use qgtl_core::dataset::{generate, Dataset};
use qgtl_core::explain::{
    centers_to_csv, cluster_kernel_spectra, compare_maxima, elbow, maxima_histogram, maxima_of, ClusterResult,
    KMeansConfig, MaximaRecord, SpectrumScaling,
};
use qgtl_core::filtering::{CoarsenSpec, Coarsener};
use qgtl_core::metrics::{
    evaluate_offline, filtered_reference, toml_float, histogram_pdf, ke_error, ke_spectrum, run_online, sigma_range,
    upper_pv_samples, CnnClosure, Closure, NoClosure, OnlineRun, DISCARD_FRACTION,
};
use qgtl_core::qg::{random_initial_condition, run_simulation, QgModel};
use qgtl_core::seed;
use qgtl_core::specanalysis::{activation_spectra, kernel_spectra, mean_spectrum, output_spectrum_ratio, spectra_to_csv};
use qgtl_core::{Error, Result};

use crate::context::{read_bytes, Ctx, Manifest, Staging};
use crate::{Command, GlobalArgs};

pub fn run(g: &GlobalArgs, cmd: Command) -> Result<()> {
    let ctx = Ctx::new(g)?;
    match cmd {
        Command::Simulate { case, steps, interval } => simulate(&ctx, case.as_deref(), steps, interval),
        Command::Datagen { case, samples, split } => datagen(&ctx, case.as_deref(), samples, &split),
        Command::Train { data, epochs, name } => train(&ctx, &data, epochs, name),
        Command::Transfer {
            base,
            data,
            fraction,
            layers,
            epochs,
            name,
        } => transfer(&ctx, &base, &data, fraction, layers, epochs, name),
        Command::EvalOffline { model, data, name } => eval_offline(&ctx, &model, &data, name),
        Command::EvalOnline { case, model, years, name } => {
            eval_online(&ctx, case.as_deref(), model.as_deref(), years, name)
        }
        Command::Explain {
            base,
            tl,
            layer,
            k,
            k_max,
            raw,
            name,
        } => explain(&ctx, &base, tl.as_deref(), layer, k, k_max, raw, name),
        Command::Spectra {
            model,
            data,
            samples,
            name,
        } => spectra(&ctx, &model, &data, samples, name),
    }
}

fn load_model(path: &Path) -> Result<CnnModel> {
    let c = TensorContainer::from_bytes(&read_bytes(path)?).map_err(|e| with_path(e, path))?;
    Ok(model_from_container(&c).map_err(|e| with_path(e, path))?.0)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Corrupt { reason, .. } => Error::Corrupt {
            path: Some(path.to_path_buf()),
            reason,
        },
        other => other,
    }
}

/// Name of an artifact: its file stem, or its directory for generic file names.
fn stem(path: &Path) -> String {
    let s = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    if matches!(s.as_str(), "model" | "dataset") {
        if let Some(d) = path.parent().and_then(|p| p.file_name()) {
            return d.to_string_lossy().into_owned();
        }
    }
    s
}

fn simulate(ctx: &Ctx, case: Option<&str>, steps: Option<u64>, interval: Option<u64>) -> Result<()> {
    let case = ctx.case(case)?;
    let profile = ctx.profile();
    let params = case.params(profile.nx_hi)?;
    let steps = steps.unwrap_or((profile.spinup_years * case.steps_per_year()).round() as u64);
    let interval = interval.unwrap_or(ctx.cfg.eval.online_snapshot_interval);
    let run_seed = seed::derive(ctx.seed, &format!("simulate/{}", case.label));
    let ic = random_initial_condition(run_seed, &params, profile.ic_amplitude)?;
    let snaps = run_simulation(&params, ic, steps, interval)?;

    let model = QgModel::new(&params)?;
    let n = params.nx;
    let mut q = Vec::with_capacity(snaps.len() * 2 * n * n);
    for s in &snaps {
        for layer in s.to_physical(model.fft()) {
            q.extend(layer);
        }
    }
    let mut c = TensorContainer::new(ctx.hash);
    c.set_meta("kind", "snapshots");
    c.set_meta("case", case.label.clone());
    c.set_meta("grid", n.to_string());
    c.set_meta("seed", run_seed.to_string());
    c.push(Tensor::f64("q", vec![snaps.len(), 2, n, n], q))?;
    c.push(Tensor::f64("time", vec![snaps.len()], snaps.iter().map(|s| s.time).collect()))?;
    c.push(Tensor::f64("step", vec![snaps.len()], snaps.iter().map(|s| s.step_index as f64).collect()))?;

    let mut out = Staging::new(ctx.out.join("simulate").join(&case.label))?;
    out.write("snapshots.qgsg", &c.to_bytes())?;
    let mut m = Manifest::new("simulate");
    m.result("case", &case.label);
    m.result("steps", steps);
    m.result("snapshots", snaps.len());
    m.finish(ctx, out, "complete")
}

fn datagen(ctx: &Ctx, case: Option<&str>, samples: Option<usize>, split: &str) -> Result<()> {
    let case = ctx.case(case)?;
    let profile = ctx.profile();
    let default = match split {
        "train" => profile.n_samples,
        "test" => profile.test_samples,
        other => return Err(Error::Config(format!("split must be 'train' or 'test', got '{other}'"))),
    };
    let spec = ctx.cfg.dataset_spec(case, ctx.scale, samples.unwrap_or(default));
    let root = seed::derive(ctx.seed, &format!("datagen/{}/{split}", case.label));
    let g = generate(case, &spec, root, ctx.threads)?;
    let mut data = g.dataset;
    data.config_hash = ctx.hash;

    let status = if g.failure.is_some() { "diverged" } else { "complete" };
    let mut out = Staging::new(ctx.out.join("data").join(format!("{}-{split}", case.label)))?;
    if !data.is_empty() {
        out.write("dataset.qgsg", &data.to_container()?.to_bytes())?;
    }
    out.write("dataset.toml", data.manifest(&spec, root, status).as_bytes())?;
    let mut m = Manifest::new("datagen");
    m.result("case", &case.label);
    m.result("split", split);
    m.result("samples", data.len());
    m.result("dataset_seed", root);
    m.finish(ctx, out, status)?;
    match g.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn train(ctx: &Ctx, data_path: &Path, epochs: Option<usize>, name: Option<String>) -> Result<()> {
    let data = Dataset::read(data_path)?;
    let arch = Arch::closure(data.n, ctx.profile().hidden_channels);
    let cfg = ctx.cfg.train_config(ctx.seed, epochs.unwrap_or(ctx.profile().epochs));
    let t = train_bnn(&data, arch, &cfg)?;
    let name = name.unwrap_or_else(|| format!("bnn-{}", data.case_label));

    let mut out = Staging::new(ctx.out.join("models").join(&name))?;
    out.write("model.ckpt", &checkpoint_container(&t.model, Some(&t.optimizer), ctx.hash)?.to_bytes())?;
    out.write("log.csv", t.log.to_csv().as_bytes())?;
    let mut m = Manifest::new("train");
    m.input(data_path)?;
    m.result("case", &data.case_label);
    m.result("epochs", cfg.epochs);
    m.result("best_epoch", t.log.best_epoch.unwrap_or(0));
    m.result("best_val_loss", t.log.best_val_loss().unwrap_or(f64::NAN));
    m.finish(ctx, out, "complete")
}

fn transfer(
    ctx: &Ctx,
    base_path: &Path,
    data_path: &Path,
    fraction: Option<f64>,
    layers: Option<Vec<usize>>,
    epochs: Option<usize>,
    name: Option<String>,
) -> Result<()> {
    let base_bytes = read_bytes(base_path)?;
    let base = load_model(base_path)?;
    let data = Dataset::read(data_path)?;
    let mut tl = ctx.cfg.tl_config(ctx.seed, epochs.unwrap_or(ctx.profile().epochs));
    if let Some(f) = fraction {
        tl.data_fraction = f;
    }
    if let Some(l) = layers {
        tl.trainable_layers = l;
    }
    tl.validate()?;
    let name = name.unwrap_or_else(|| format!("tl-{}-{}", stem(base_path), data.case_label));
    let mut out = Staging::new(ctx.out.join("models").join(&name))?;
    let mut m = Manifest::new("transfer");
    m.input(base_path)?;
    m.input(data_path)?;
    m.result("trainable_layers", format!("{:?}", tl.trainable_layers));
    m.result("data_fraction", tl.data_fraction);
    if tl.data_fraction == 0.0 {
        // nothing to learn from: the base checkpoint is the result
        out.write("model.ckpt", &base_bytes)?;
        m.result("samples", 0);
        return m.finish(ctx, out, "complete");
    }
    let t = transfer_learn(&base, &data, &tl)?;
    out.write("model.ckpt", &checkpoint_container(&t.model, Some(&t.optimizer), ctx.hash)?.to_bytes())?;
    out.write("log.csv", t.log.to_csv().as_bytes())?;
    m.result("samples", qgtl_core::cnn::transfer_subset_len(data.len(), tl.data_fraction));
    m.result("best_epoch", t.log.best_epoch.unwrap_or(0));
    m.finish(ctx, out, "complete")
}

fn eval_offline(ctx: &Ctx, model_path: &Path, data_path: &Path, name: Option<String>) -> Result<()> {
    let model = load_model(model_path)?;
    let data = Dataset::read(data_path)?;
    let id = stem(model_path);
    let report = evaluate_offline(&model, &data, &id)?;
    let name = name.unwrap_or_else(|| format!("{id}-on-{}", stem(data_path)));
    let mut out = Staging::new(ctx.out.join("eval").join(name))?;
    out.write("offline.csv", report.to_csv().as_bytes())?;
    out.write("offline.toml", report.summary().as_bytes())?;
    let mut m = Manifest::new("eval-offline");
    m.input(model_path)?;
    m.input(data_path)?;
    for (i, l) in report.layers.iter().enumerate() {
        m.result(&format!("cc_{}", i + 1), l.cc);
        if !l.excluded_bins.is_empty() {
            eprintln!("warning: layer {}: spectral bins {:?} excluded (no true power)", i + 1, l.excluded_bins);
        }
    }
    m.finish(ctx, out, "complete")
}

fn eval_online(
    ctx: &Ctx,
    case: Option<&str>,
    model_path: Option<&Path>,
    years: Option<f64>,
    name: Option<String>,
) -> Result<()> {
    let case = ctx.case(case)?;
    let profile = ctx.profile();
    let p_hi = case.params(profile.nx_hi)?;
    let p_lo = case.params(profile.nx_lo())?;
    let coarsener = Coarsener::new(CoarsenSpec::new(profile.nx_hi, profile.factor, case.l)?);
    let model = model_path.map(load_model).transpose()?;
    if let Some(m) = &model {
        if m.n != p_lo.nx {
            return Err(Error::shape(p_lo.nx, m.n));
        }
    }
    let years = years.unwrap_or(profile.online_years);
    let n_steps = (years * case.steps_per_year()).round() as u64;
    let spinup = (profile.spinup_years * case.steps_per_year()).round() as u64;
    let interval = ctx.cfg.eval.online_snapshot_interval;
    let ic_seed = seed::derive(ctx.seed, &format!("online/{}", case.label));
    let ic = random_initial_condition(ic_seed, &p_hi, profile.ic_amplitude)?;
    let reference = filtered_reference(&p_hi, &coarsener, ic, spinup, n_steps, interval)?;

    let mut runs: Vec<(&str, OnlineRun)> = vec![(
        "reference",
        OnlineRun {
            trajectory: reference.trajectory.clone(),
            steps_run: n_steps,
            n_steps,
            stable: true,
            diverged_at: None,
        },
    )];
    runs.push(("bare", run_online(&mut NoClosure, &p_lo, reference.ic_lo.clone(), n_steps, interval)?));
    if let Some(m) = &model {
        let mut closure = CnnClosure::new(m)?;
        let c: &mut dyn Closure = &mut closure;
        runs.push(("cnn", run_online(c, &p_lo, reference.ic_lo.clone(), n_steps, interval)?));
    }

    let lo = QgModel::new(&p_lo)?;
    let ref_q = upper_pv_samples(&reference.trajectory, &lo, DISCARD_FRACTION)?;
    let (a, b) = sigma_range(&ref_q, 5.0)?;
    let ref_ke = ke_spectrum(&reference.trajectory, &lo, DISCARD_FRACTION)?;
    let mut ke_csv = String::from("run,layer,k,power\n");
    let mut pdf_csv = String::from("run,lower,upper,density\n");
    let mut summary = String::new();
    let mut m = Manifest::new("eval-online");
    if let Some(p) = model_path {
        m.input(p)?;
    }
    for (label, run) in &runs {
        let ke = ke_spectrum(&run.trajectory, &lo, DISCARD_FRACTION)?;
        let pdf = histogram_pdf(&upper_pv_samples(&run.trajectory, &lo, DISCARD_FRACTION)?, ctx.cfg.eval.pdf_bins, a, b)?;
        for (layer, s) in ke.iter().enumerate() {
            for (k, p) in s.k.iter().zip(&s.power) {
                let _ = writeln!(ke_csv, "{label},{},{k},{p:e}", layer + 1);
            }
        }
        for (d, e) in pdf.density.iter().zip(pdf.edges.windows(2)) {
            let _ = writeln!(pdf_csv, "{label},{:e},{:e},{d:e}", e[0], e[1]);
        }
        let err = ke_error(&ke, &ref_ke)?;
        let _ = writeln!(
            summary,
            "[{label}]\nstable = {}\nsteps_run = {}\ndiverged_at = {}\nke_error = {}\npdf_dropped = {}\n",
            run.stable,
            run.steps_run,
            run.diverged_at.map(|s| s.to_string()).unwrap_or_else(|| "\"none\"".into()),
            toml_float(err),
            pdf.dropped
        );
        m.result(&format!("{label}_stable"), run.stable);
        m.result(&format!("{label}_ke_error"), err);
    }
    let name = name.unwrap_or_else(|| match model_path {
        Some(p) => format!("online-{}-{}", stem(p), case.label),
        None => format!("online-bare-{}", case.label),
    });
    let mut out = Staging::new(ctx.out.join("eval").join(name))?;
    out.write("ke_spectra.csv", ke_csv.as_bytes())?;
    out.write("pv_pdf.csv", pdf_csv.as_bytes())?;
    out.write("online.toml", summary.as_bytes())?;
    m.result("case", &case.label);
    m.result("n_steps", n_steps);
    m.finish(ctx, out, "complete")
}

fn maxima_csv(records: &[MaximaRecord]) -> String {
    let mut s = String::from("index,in_channel,out_channel,kx,ky,amplitude,kappa\n");
    for (i, r) in records.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{},{:e},{}", r.in_channel, r.out_channel, r.kx, r.ky, r.amplitude, r.kappa);
    }
    s
}

fn assignments_csv(result: &ClusterResult, records: &[MaximaRecord]) -> String {
    let mut s = String::from("index,in_channel,out_channel,cluster\n");
    for (i, (c, r)) in result.assignments.iter().zip(records).enumerate() {
        let _ = writeln!(s, "{i},{},{},{c}", r.in_channel, r.out_channel);
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn explain(
    ctx: &Ctx,
    base_path: &Path,
    tl_path: Option<&Path>,
    layer: usize,
    k: usize,
    k_max: usize,
    raw: bool,
    name: Option<String>,
) -> Result<()> {
    let scaling = if raw { SpectrumScaling::Raw } else { SpectrumScaling::UnitMax };
    let kseed = seed::derive(ctx.seed, "explain");
    let mut models = vec![("base", base_path, load_model(base_path)?)];
    if let Some(p) = tl_path {
        models.push(("tl", p, load_model(p)?));
    }
    let mut m = Manifest::new("explain");
    let name = name.unwrap_or_else(|| format!("explain-{}-layer{layer}", stem(base_path)));
    let mut out = Staging::new(ctx.out.join("explain").join(name))?;
    let mut maxima = Vec::new();
    for (label, path, model) in &models {
        m.input(path)?;
        let spectra = kernel_spectra(model, layer, model.n)?;
        let records = maxima_of(&spectra);
        let clusters = cluster_kernel_spectra(&spectra, &KMeansConfig::new(k.min(spectra.len()), kseed), scaling)?;
        let maps: Vec<Vec<f64>> = spectra.iter().map(|s| s.magnitude.clone()).collect();
        let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
        let ks: Vec<usize> = (1..=k_max.min(spectra.len())).collect();
        let mut elbow_csv = String::from("k,inertia\n");
        for (kk, inertia) in elbow(&refs, &ks, kseed)? {
            let _ = writeln!(elbow_csv, "{kk},{inertia:e}");
        }
        out.write(&format!("clusters_{label}.csv"), centers_to_csv(&clusters, model.n).as_bytes())?;
        out.write(&format!("assignments_{label}.csv"), assignments_csv(&clusters, &records).as_bytes())?;
        out.write(&format!("elbow_{label}.csv"), elbow_csv.as_bytes())?;
        out.write(&format!("maxima_{label}.csv"), maxima_csv(&records).as_bytes())?;
        out.write(&format!("histogram_{label}.csv"), maxima_histogram(&records, false)?.to_csv().as_bytes())?;
        out.write(
            &format!("histogram_{label}_folded.csv"),
            maxima_histogram(&records, true)?.to_csv().as_bytes(),
        )?;
        m.result(&format!("{label}_inertia"), clusters.inertia);
        maxima.push(records);
    }
    m.result("layer", layer);
    m.result("kernels", maxima[0].len());
    if maxima.len() == 2 {
        let cmp = compare_maxima(&maxima[0], &maxima[1])?;
        out.write("comparison.csv", cmp.to_csv().as_bytes())?;
        m.result("unchanged", cmp.unchanged.len());
        m.result("shifted", cmp.shifted.len());
        m.result("mean_ratio", cmp.mean_ratio().map(|r| r.to_string()).unwrap_or_else(|| "none".into()));
    }
    m.finish(ctx, out, "complete")
}

fn spectra(ctx: &Ctx, model_path: &Path, data_path: &Path, samples: Option<usize>, name: Option<String>) -> Result<()> {
    let model = load_model(model_path)?;
    let mut data = Dataset::read(data_path)?;
    if data.n != model.n {
        return Err(Error::shape(model.n, data.n));
    }
    if let Some(s) = samples {
        data.records.truncate(s.max(1));
    }
    let inputs: Vec<&[f64]> = data.records.iter().map(|r| r.inputs.as_slice()).collect();
    let hidden: Vec<usize> = (1..model.layers.len()).collect();
    let acts = activation_spectra(&model, &inputs, &hidden)?;
    let preds = model.predict_batch(&inputs)?;
    let np = data.n * data.n;
    let mut outputs = Vec::new();
    let mut ratio_csv = String::from("layer,k_x,ratio,flagged\n");
    for c in 0..model.out_ch() {
        let p: Vec<&[f64]> = preds.iter().map(|v| &v[c * np..(c + 1) * np]).collect();
        let t: Vec<&[f64]> = data.records.iter().map(|r| &r.targets[c * np..(c + 1) * np]).collect();
        let mut sp = mean_spectrum(&p, data.n, "prediction")?;
        let mut st = mean_spectrum(&t, data.n, "truth")?;
        sp.layer = Some(c + 1);
        st.layer = Some(c + 1);
        outputs.push(sp);
        outputs.push(st);
        let r = output_spectrum_ratio(&p, &t, data.n)?;
        for ((k, v), f) in r.ratio.k.iter().zip(&r.ratio.power).zip(&r.flagged) {
            let _ = writeln!(ratio_csv, "{},{k},{v:e},{f}", c + 1);
        }
    }
    let name = name.unwrap_or_else(|| format!("spectra-{}-on-{}", stem(model_path), stem(data_path)));
    let mut out = Staging::new(ctx.out.join("spectra").join(name))?;
    out.write("activation_spectra.csv", spectra_to_csv(&acts).as_bytes())?;
    out.write("output_spectra.csv", spectra_to_csv(&outputs).as_bytes())?;
    out.write("output_ratio.csv", ratio_csv.as_bytes())?;
    let mut m = Manifest::new("spectra");
    m.input(model_path)?;
    m.input(data_path)?;
    m.result("samples", inputs.len());
    for s in &acts {
        m.result(&format!("activation_power_{}", s.layer.unwrap_or(0)), s.total());
    }
    m.finish(ctx, out, "complete")
}
