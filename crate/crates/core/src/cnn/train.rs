use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::model::{check_batch, Arch, CnnModel, Engine, Gradients};
use crate::dataset::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &CnnModel) -> Self {
        AdamState {
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of the layers listed in `layers` (zero-based).
pub fn adam_step(
    model: &mut CnnModel,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
    layers: &[usize],
) -> Result<()> {
    if grads.layers.len() != model.layers.len() || state.m.layers.len() != model.layers.len() {
        return Err(Error::shape(model.layers.len(), grads.layers.len()));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for &idx in layers {
        let layer = &mut model.layers[idx];
        let g = &grads.layers[idx];
        let (m, v) = (&mut state.m.layers[idx], &mut state.v.layers[idx]);
        if g.weights.len() != layer.weights.len() || m.weights.len() != layer.weights.len() {
            return Err(Error::shape(layer.weights.len(), g.weights.len()));
        }
        let pairs = [
            (&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights),
            (&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias),
        ];
        for (p, g, m, v) in pairs {
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement needed to reset patience.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 10.0,
            patience: 5,
            threshold: 1e-4,
        }
    }
}

/// Divides the learning rate by `factor` once the monitored loss has failed to
/// improve for more than `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub cfg: PlateauConfig,
    pub lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Self {
        Plateau {
            cfg,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss and returns the learning rate for the next.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.cfg.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.cfg.patience {
                self.lr /= self.cfg.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub plateau: PlateauConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            batch_size: 8,
            epochs: 100,
            val_fraction: 0.1,
            plateau: PlateauConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.batch_size == 0 || !(self.plateau.factor > 1.0) {
            return Err(Error::Config("need lr0 > 0, batch_size >= 1 and plateau factor > 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TlConfig {
    pub train: TrainConfig,
    /// One-based layer numbers to retrain.
    pub trainable_layers: Vec<usize>,
    pub data_fraction: f64,
    /// Refit normalisation on the target data instead of keeping the base statistics.
    pub refit_norm: bool,
}

impl TlConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.trainable_layers.is_empty() || self.trainable_layers.contains(&0) {
            return Err(Error::Config("trainable_layers must be non-empty one-based layer numbers".into()));
        }
        if !(0.0..=1.0).contains(&self.data_fraction) {
            return Err(Error::Config("data_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned; `None` when no training happened.
    pub best_epoch: Option<usize>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", e.epoch, e.train_loss, e.val_loss, e.lr);
        }
        s
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|b| self.epochs[b - 1].val_loss)
    }
}

/// Normalized input/target copies of a dataset.
struct Prepared {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl Prepared {
    fn new(model: &CnnModel, data: &Dataset, indices: &[usize]) -> Self {
        Prepared {
            inputs: indices.iter().map(|&i| model.normalize_input(&data.records[i].inputs)).collect(),
            targets: indices.iter().map(|&i| model.normalize_target(&data.records[i].targets)).collect(),
        }
    }

    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn batch(&self, idx: &[usize]) -> (Vec<&[f64]>, Vec<&[f64]>) {
        (
            idx.iter().map(|&i| self.inputs[i].as_slice()).collect(),
            idx.iter().map(|&i| self.targets[i].as_slice()).collect(),
        )
    }
}

/// Standard deviations of zero (constant channels) are replaced by one.
pub fn sanitize_stats(mut s: ChannelStats) -> ChannelStats {
    for v in s.input_std.iter_mut().chain(s.target_std.iter_mut()) {
        if !(*v > 0.0) || !v.is_finite() {
            *v = 1.0;
        }
    }
    s
}

/// Seeded train/validation split; keeps at least one training sample.
pub fn split_indices(len: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut seed::rng(seed, "split"));
    let n_val = ((len as f64 * val_fraction).floor() as usize).min(len.saturating_sub(1));
    let val = idx.split_off(len - n_val);
    (idx, val)
}

/// Mean squared error of `model` in normalized space over records `indices`.
pub fn evaluate_loss(model: &CnnModel, data: &Dataset, indices: &[usize]) -> Result<f64> {
    let engine = Engine::new(model)?;
    let prep = Prepared::new(model, data, indices);
    mean_loss(&engine, model, &prep)
}

fn mean_loss(engine: &Engine, model: &CnnModel, prep: &Prepared) -> Result<f64> {
    if prep.len() == 0 {
        return Err(Error::Argument("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, t) in prep.inputs.iter().zip(&prep.targets) {
        let y = engine.forward(model, x, None, &[], &mut Vec::new());
        total += y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += y.len();
    }
    Ok(total / count as f64)
}

/// Trains the given layers (zero-based) of `model` in place and returns the log;
/// the model ends at the best-monitored-loss parameters.
fn fit(
    model: &mut CnnModel,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    trainable: &[usize],
    mut adam: AdamState,
) -> Result<(TrainingLog, AdamState)> {
    let lowest = *trainable.iter().min().expect("non-empty trainable set");
    let train = Prepared::new(model, data, train_idx);
    let val = Prepared::new(model, data, val_idx);
    let mut engine = Engine::new(model)?;
    let mut plateau = Plateau::new(cfg.plateau, cfg.lr0);
    let mut shuffle_rng = seed::rng(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, CnnModel, AdamState)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = plateau.lr;
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (xs, ts) = train.batch(chunk);
            check_batch(model, &xs, &ts)?;
            let (loss, grads) = engine.loss_and_gradients(model, &xs, &ts, lowest);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            sum += loss * chunk.len() as f64;
            adam_step(model, &grads, &mut adam, lr, &cfg.adam, trainable)?;
            for &idx in trainable {
                engine.refresh(model, idx)?;
            }
        }
        if !model.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = if val.len() > 0 {
            mean_loss(&engine, model, &val)?
        } else {
            train_loss
        };
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, model.clone(), adam.clone()));
            log.best_epoch = Some(epoch);
        }
        plateau.step(val_loss);
    }
    if let Some((_, m, a)) = best {
        *model = m;
        adam = a;
    }
    Ok((log, adam))
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: CnnModel,
    pub log: TrainingLog,
    pub optimizer: AdamState,
}

/// Trains a network from scratch; returns the checkpoint with the lowest validation loss.
pub fn train_bnn(data: &Dataset, arch: Arch, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    if arch.n != data.n {
        return Err(Error::shape(data.n, arch.n));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let mut model = CnnModel::new(arch, &mut seed::rng(cfg.seed, "init"))?;
    model.norm = sanitize_stats(data.subset(&train_idx).channel_stats());
    let all: Vec<usize> = (0..model.layers.len()).collect();
    let adam = AdamState::new(&model);
    let (log, optimizer) = fit(&mut model, data, &train_idx, &val_idx, cfg, &all, adam)?;
    Ok(Trained { model, log, optimizer })
}

/// Number of target samples used for a given fraction.
pub fn transfer_subset_len(len: usize, fraction: f64) -> usize {
    ((len as f64 * fraction).floor() as usize).min(len)
}

/// Retrains only the configured layers of `base` on a seeded fraction of `target`.
/// Returns `base` unchanged when the fraction selects no training samples.
pub fn transfer_learn(base: &CnnModel, target: &Dataset, tl: &TlConfig) -> Result<Trained> {
    tl.validate()?;
    base.validate()?;
    let n_layers = base.layers.len();
    if tl.trainable_layers.iter().any(|&l| l > n_layers) || tl.trainable_layers.len() >= n_layers {
        return Err(Error::Config(format!(
            "trainable layers {:?} must be a strict subset of 1..={n_layers}",
            tl.trainable_layers
        )));
    }
    if target.n != base.n {
        return Err(Error::shape(base.n, target.n));
    }
    let mut pool: Vec<usize> = (0..target.len()).collect();
    pool.shuffle(&mut seed::rng(tl.train.seed, "transfer-subset"));
    pool.truncate(transfer_subset_len(target.len(), tl.data_fraction));
    let mut model = base.clone();
    if pool.is_empty() {
        return Ok(Trained {
            optimizer: AdamState::new(&model),
            model,
            log: TrainingLog::default(),
        });
    }
    let (tr, va) = split_indices(pool.len(), tl.train.val_fraction, tl.train.seed);
    let train_idx: Vec<usize> = tr.iter().map(|&i| pool[i]).collect();
    let val_idx: Vec<usize> = va.iter().map(|&i| pool[i]).collect();
    if tl.refit_norm {
        model.norm = sanitize_stats(target.subset(&train_idx).channel_stats());
    }
    let mut trainable: Vec<usize> = tl.trainable_layers.iter().map(|l| l - 1).collect();
    trainable.sort_unstable();
    trainable.dedup();
    let adam = AdamState::new(&model);
    let (log, optimizer) = fit(&mut model, target, &train_idx, &val_idx, &tl.train, &trainable, adam)?;
    Ok(Trained { model, log, optimizer })
}
