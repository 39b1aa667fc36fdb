//! Training datasets: coarse velocities paired with subgrid forcing.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::CaseConfig;
use crate::container::{hex, Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::filtering::{coarse_velocities, subgrid_forcing, CoarsenSpec, Coarsener};
use crate::qg::{random_initial_condition, QgModel, Simulation};
use crate::seed;

pub const INPUT_CHANNELS: usize = 4;
pub const TARGET_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub case_label: String,
    pub member: usize,
    pub seed: u64,
    /// Model time of the snapshot (s).
    pub time: f64,
}

/// One training pair on the coarse grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `(u1, v1, u2, v2)`, channel-major `[4][n][n]` (m/s).
    pub inputs: Vec<f64>,
    /// `(Pi_q1, Pi_q2)`, channel-major `[2][n][n]` (1/s^2).
    pub targets: Vec<f64>,
    pub provenance: Provenance,
}

/// Per-channel means and standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(in_ch: usize, out_ch: usize) -> Self {
        ChannelStats {
            input_mean: vec![0.0; in_ch],
            input_std: vec![1.0; in_ch],
            target_mean: vec![0.0; out_ch],
            target_std: vec![1.0; out_ch],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Coarse grid size.
    pub n: usize,
    pub case_label: String,
    pub records: Vec<SampleRecord>,
    pub config_hash: [u8; 32],
}

/// How a dataset is sampled from high-resolution runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub nx_hi: usize,
    pub factor: usize,
    pub n_samples: usize,
    /// Independent simulations the samples are split across.
    pub members: usize,
    pub spinup_steps: u64,
    pub stride: u64,
    pub ic_amplitude: f64,
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if self.members == 0 || self.stride == 0 {
            return Err(Error::Config("members and stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Samples drawn from member `m`; earlier members take the remainder.
    pub fn member_samples(&self, m: usize) -> usize {
        let base = self.n_samples / self.members;
        base + usize::from(m < self.n_samples % self.members)
    }
}

/// Result of a generation run; `failure` is set when a member diverged,
/// in which case `dataset` holds the records produced before it.
#[derive(Debug)]
pub struct Generation {
    pub dataset: Dataset,
    pub failure: Option<Error>,
}

/// Runs the member simulations and extracts samples, in member order.
/// Members are spread over `threads` workers; output does not depend on it.
pub fn generate(case: &CaseConfig, spec: &DatasetSpec, root_seed: u64, threads: usize) -> Result<Generation> {
    spec.validate()?;
    let coarsen = CoarsenSpec::new(spec.nx_hi, spec.factor, case.l)?;
    let p_hi = case.params(spec.nx_hi)?;
    let p_lo = case.params(coarsen.nx_lo)?;
    let threads = threads.clamp(1, spec.members);

    let run_member = |m: usize| -> (Vec<SampleRecord>, Option<Error>) {
        let mut out = Vec::with_capacity(spec.member_samples(m));
        let err = member_samples(case, spec, &coarsen, &p_hi, &p_lo, root_seed, m, &mut out).err();
        (out, err)
    };

    let mut per_member: Vec<(Vec<SampleRecord>, Option<Error>)> = Vec::with_capacity(spec.members);
    if threads == 1 {
        per_member.extend((0..spec.members).map(run_member));
    } else {
        let chunks: Vec<Vec<usize>> = (0..threads)
            .map(|t| (t..spec.members).step_by(threads).collect())
            .collect();
        let mut slots: Vec<Option<(Vec<SampleRecord>, Option<Error>)>> = (0..spec.members).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|ms| s.spawn(|| ms.iter().map(|&m| (m, run_member(m))).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                for (m, r) in h.join().expect("datagen worker panicked") {
                    slots[m] = Some(r);
                }
            }
        });
        per_member.extend(slots.into_iter().map(|s| s.expect("member result")));
    }

    let mut records = Vec::with_capacity(spec.n_samples);
    let mut failure = None;
    for (recs, err) in per_member {
        records.extend(recs);
        if let Some(e) = err {
            failure = Some(e);
            break;
        }
    }
    Ok(Generation {
        dataset: Dataset {
            n: coarsen.nx_lo,
            case_label: case.label.clone(),
            records,
            config_hash: [0; 32],
        },
        failure,
    })
}

#[allow(clippy::too_many_arguments)]
fn member_samples(
    case: &CaseConfig,
    spec: &DatasetSpec,
    coarsen: &CoarsenSpec,
    p_hi: &crate::qg::ModelParams,
    p_lo: &crate::qg::ModelParams,
    root_seed: u64,
    m: usize,
    out: &mut Vec<SampleRecord>,
) -> Result<()> {
    let member_seed = seed::derive(root_seed, &format!("member/{m}"));
    let ic = random_initial_condition(member_seed, p_hi, spec.ic_amplitude)?;
    let mut sim = Simulation::new(p_hi, ic)?;
    let lo = QgModel::new(p_lo)?;
    let coarsener = Coarsener::new(coarsen.clone());
    sim.advance(spec.spinup_steps)?;
    let n = coarsen.nx_lo;
    for s in 0..spec.member_samples(m) {
        if s > 0 {
            sim.advance(spec.stride)?;
        }
        let vel = coarse_velocities(&sim.state, &sim.model, &lo, &coarsener)?;
        let pi = subgrid_forcing(&sim.state, &sim.model, &lo, &coarsener)?;
        let mut inputs = Vec::with_capacity(INPUT_CHANNELS * n * n);
        for c in &vel {
            inputs.extend_from_slice(c);
        }
        let mut targets = Vec::with_capacity(TARGET_CHANNELS * n * n);
        targets.extend_from_slice(&pi[0]);
        targets.extend_from_slice(&pi[1]);
        if !inputs.iter().chain(&targets).all(|x| x.is_finite()) {
            return Err(Error::Diverged {
                step: sim.state.step_index,
            });
        }
        out.push(SampleRecord {
            inputs,
            targets,
            provenance: Provenance {
                case_label: case.label.clone(),
                member: m,
                seed: member_seed,
                time: sim.state.time,
            },
        });
    }
    Ok(())
}

/// Generates a complete dataset or returns the first divergence.
pub fn generate_dataset(case: &CaseConfig, spec: &DatasetSpec, root_seed: u64, threads: usize) -> Result<Dataset> {
    let g = generate(case, spec, root_seed, threads)?;
    match g.failure {
        Some(e) => Err(e),
        None => Ok(g.dataset),
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.n * self.n
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            n: self.n,
            case_label: self.case_label.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            config_hash: self.config_hash,
        }
    }

    /// Population mean and standard deviation of every channel over all samples and points.
    pub fn channel_stats(&self) -> ChannelStats {
        let np = self.plane();
        let stats = |c: usize, pick: fn(&SampleRecord) -> &Vec<f64>| {
            mean_std(self.records.iter().flat_map(move |r| pick(r)[c * np..(c + 1) * np].iter().copied()))
        };
        let (input_mean, input_std) = (0..INPUT_CHANNELS).map(|c| stats(c, |r| &r.inputs)).unzip();
        let (target_mean, target_std) = (0..TARGET_CHANNELS).map(|c| stats(c, |r| &r.targets)).unzip();
        ChannelStats {
            input_mean,
            input_std,
            target_mean,
            target_std,
        }
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let (s, n) = (self.len(), self.n);
        let mut c = TensorContainer::new(self.config_hash);
        c.set_meta("kind", "dataset");
        c.set_meta("case", &self.case_label);
        let seeds: Vec<String> = self.records.iter().map(|r| r.provenance.seed.to_string()).collect();
        c.set_meta("seeds", seeds.join(","));
        c.push(Tensor::f64(
            "inputs",
            vec![s, INPUT_CHANNELS, n, n],
            self.records.iter().flat_map(|r| r.inputs.iter().copied()).collect(),
        ))?;
        c.push(Tensor::f64(
            "targets",
            vec![s, TARGET_CHANNELS, n, n],
            self.records.iter().flat_map(|r| r.targets.iter().copied()).collect(),
        ))?;
        c.push(Tensor::f64("times", vec![s], self.records.iter().map(|r| r.provenance.time).collect()))?;
        c.push(Tensor::f64(
            "members",
            vec![s],
            self.records.iter().map(|r| r.provenance.member as f64).collect(),
        ))?;
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Dataset> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: None,
            reason: reason.to_string(),
        };
        if c.meta("kind") != Some("dataset") {
            return Err(corrupt("not a dataset container"));
        }
        let case_label = c.meta("case").ok_or_else(|| corrupt("missing case label"))?.to_string();
        let (shape, inputs) = c.f64_tensor("inputs")?;
        if shape.len() != 4 || shape[1] != INPUT_CHANNELS || shape[2] != shape[3] {
            return Err(corrupt("bad inputs shape"));
        }
        let (s, n) = (shape[0], shape[2]);
        let (tshape, targets) = c.f64_tensor("targets")?;
        if tshape != [s, TARGET_CHANNELS, n, n] {
            return Err(corrupt("bad targets shape"));
        }
        let (_, times) = c.f64_tensor("times")?;
        let (_, members) = c.f64_tensor("members")?;
        let seeds: Vec<u64> = match c.meta("seeds") {
            Some("") | None => Vec::new(),
            Some(text) => text
                .split(',')
                .map(|t| t.parse().map_err(|_| corrupt("bad seed list")))
                .collect::<Result<_>>()?,
        };
        if times.len() != s || members.len() != s || seeds.len() != s {
            return Err(corrupt("provenance length mismatch"));
        }
        let (ni, nt) = (INPUT_CHANNELS * n * n, TARGET_CHANNELS * n * n);
        let records = (0..s)
            .map(|i| SampleRecord {
                inputs: inputs[i * ni..(i + 1) * ni].to_vec(),
                targets: targets[i * nt..(i + 1) * nt].to_vec(),
                provenance: Provenance {
                    case_label: case_label.clone(),
                    member: members[i] as usize,
                    seed: seeds[i],
                    time: times[i],
                },
            })
            .collect();
        Ok(Dataset {
            n,
            case_label,
            records,
            config_hash: c.config_hash,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        Dataset::from_container(&TensorContainer::read(path)?).map_err(|e| match e {
            Error::Corrupt { reason, .. } => Error::Corrupt {
                path: Some(path.to_path_buf()),
                reason,
            },
            other => other,
        })
    }

    /// Plain-text manifest: case, config hash, channel statistics and one line per sample.
    pub fn manifest(&self, spec: &DatasetSpec, root_seed: u64, status: &str) -> String {
        let mut m = String::new();
        let _ = writeln!(m, "status = \"{status}\"");
        let _ = writeln!(m, "case = \"{}\"", self.case_label);
        let _ = writeln!(m, "config_hash = \"{}\"", hex(&self.config_hash));
        let _ = writeln!(m, "root_seed = {root_seed}");
        let _ = writeln!(m, "n_samples = {}", self.len());
        let _ = writeln!(m, "grid = {}", self.n);
        let _ = writeln!(m, "\n[spec]\n{}", toml::to_string(spec).unwrap_or_default().trim_end());
        if !self.is_empty() {
            let _ = writeln!(
                m,
                "\n[channel_stats]\n{}",
                toml::to_string(&self.channel_stats()).unwrap_or_default().trim_end()
            );
        }
        let _ = writeln!(m, "\n# sample member seed time_s");
        for (i, r) in self.records.iter().enumerate() {
            let p = &r.provenance;
            let _ = writeln!(m, "# {i} {} {} {}", p.member, p.seed, p.time);
        }
        m
    }
}

/// Reads the channel statistics back from a manifest.
pub fn manifest_channel_stats(manifest: &str) -> Result<ChannelStats> {
    let corrupt = |reason: String| Error::Corrupt { path: None, reason };
    let table: toml::Table = toml::from_str(manifest).map_err(|e| corrupt(format!("manifest: {}", e.message())))?;
    let stats = table
        .get("channel_stats")
        .cloned()
        .ok_or_else(|| corrupt("manifest has no channel statistics".into()))?;
    stats.try_into().map_err(|e: toml::de::Error| corrupt(format!("manifest: {}", e.message())))
}
