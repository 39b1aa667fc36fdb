//! Experiment configuration: case definitions, scale profiles and
//! training settings, read from TOML.
//!
//! The schema is the one used by `configs/experiment.toml`; the same file is
//! compiled in as [`ExperimentConfig::builtin`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cnn::{AdamConfig, PlateauConfig, TlConfig, TrainConfig};
use crate::container::sha256;
use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::qg::ModelParams;

const BUILTIN: &str = include_str!("../../../configs/experiment.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Toy,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "toy" => Ok(Scale::Toy),
            other => Err(Error::Config(format!("unknown scale profile '{other}'"))),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Toy => "toy",
        })
    }
}

/// Physical definition of one flow case; the grid size comes from the profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub label: String,
    /// Free-form description, `"eddy"` or `"jet"`.
    pub regime: String,
    pub l: f64,
    pub h1: f64,
    pub h2: f64,
    pub f0: f64,
    pub beta: f64,
    /// Deformation radius (m); reduced gravity is derived from it.
    pub rd: f64,
    pub r_ek: f64,
    pub u1: f64,
    pub u2: f64,
    pub dt: f64,
}

impl CaseConfig {
    pub fn params(&self, nx: usize) -> Result<ModelParams> {
        ModelParams::from_deformation_radius(
            self.l, nx, self.h1, self.h2, self.f0, self.beta, self.rd, self.r_ek, self.u1, self.u2,
            self.dt, &self.label,
        )
    }

    pub fn steps_per_year(&self) -> f64 {
        365.0 * 86400.0 / self.dt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleProfile {
    pub nx_hi: usize,
    pub factor: usize,
    pub hidden_channels: usize,
    pub n_samples: usize,
    pub members: usize,
    pub test_samples: usize,
    pub spinup_years: f64,
    /// Steps between consecutive samples.
    pub stride: u64,
    pub ic_amplitude: f64,
    pub epochs: usize,
    pub online_years: f64,
}

impl ScaleProfile {
    pub fn nx_lo(&self) -> usize {
        self.nx_hi / self.factor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profiles {
    pub paper: ScaleProfile,
    pub toy: ScaleProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub scale: Scale,
    pub out: PathBuf,
    pub base_case: String,
    pub target_cases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    /// One-based layer indices.
    pub trainable_layers: Vec<usize>,
    pub data_fraction: f64,
    pub refit_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub online_snapshot_interval: u64,
    pub pdf_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(rename = "case")]
    pub cases: Vec<CaseConfig>,
    pub profile: Profiles,
    pub train: TrainSection,
    pub transfer: TransferSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// The configuration shipped in `configs/experiment.toml`.
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN).expect("shipped configuration parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialization; stamped into every artifact.
    pub fn hash(&self) -> [u8; 32] {
        sha256(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.cases.is_empty() {
            return Err(Error::Config("no cases defined".into()));
        }
        for (i, c) in self.cases.iter().enumerate() {
            if self.cases[..i].iter().any(|d| d.label == c.label) {
                return Err(Error::Config(format!("duplicate case '{}'", c.label)));
            }
            c.params(16)?;
        }
        self.case(&self.experiment.base_case)?;
        for t in &self.experiment.target_cases {
            self.case(t)?;
        }
        for (name, p) in [("paper", &self.profile.paper), ("toy", &self.profile.toy)] {
            let bad = |what: &str| Err(Error::Config(format!("profile.{name}: {what}")));
            if p.factor == 0 || p.nx_hi % p.factor != 0 || p.nx_lo() % 2 != 0 || p.nx_lo() < 8 {
                return bad("nx_hi must be a multiple of factor with an even coarse grid of at least 8");
            }
            if p.hidden_channels == 0 || p.n_samples == 0 || p.members == 0 {
                return bad("hidden_channels, n_samples and members must be positive");
            }
            if p.stride == 0 || !(p.ic_amplitude > 0.0) || !(p.spinup_years >= 0.0) {
                return bad("stride, ic_amplitude must be positive and spinup_years non-negative");
            }
        }
        self.train_config(0, 1).validate()?;
        self.tl_config(0, 1).validate()?;
        Ok(())
    }

    pub fn case(&self, label: &str) -> Result<&CaseConfig> {
        self.cases
            .iter()
            .find(|c| c.label == label)
            .ok_or_else(|| Error::Config(format!("unknown case '{label}'")))
    }

    pub fn profile(&self, scale: Scale) -> &ScaleProfile {
        match scale {
            Scale::Paper => &self.profile.paper,
            Scale::Toy => &self.profile.toy,
        }
    }

    pub fn active_profile(&self) -> &ScaleProfile {
        self.profile(self.experiment.scale)
    }

    pub fn dataset_spec(&self, case: &CaseConfig, scale: Scale, n_samples: usize) -> DatasetSpec {
        let p = self.profile(scale);
        DatasetSpec {
            nx_hi: p.nx_hi,
            factor: p.factor,
            n_samples,
            members: p.members.min(n_samples.max(1)),
            spinup_steps: (p.spinup_years * case.steps_per_year()).round() as u64,
            stride: p.stride,
            ic_amplitude: p.ic_amplitude,
        }
    }

    pub fn train_config(&self, seed: u64, epochs: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr0: t.lr0,
            batch_size: t.batch_size,
            epochs,
            val_fraction: t.val_fraction,
            plateau: PlateauConfig {
                factor: t.plateau_factor,
                patience: t.plateau_patience,
                threshold: t.plateau_threshold,
            },
            adam: AdamConfig {
                beta1: t.adam_beta1,
                beta2: t.adam_beta2,
                eps: t.adam_eps,
            },
            seed,
        }
    }

    pub fn tl_config(&self, seed: u64, epochs: usize) -> TlConfig {
        TlConfig {
            train: self.train_config(seed, epochs),
            trainable_layers: self.transfer.trainable_layers.clone(),
            data_fraction: self.transfer.data_fraction,
            refit_norm: self.transfer.refit_norm,
        }
    }
}
