use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qgtl_core::config::{CaseConfig, ExperimentConfig, Scale, ScaleProfile};
use qgtl_core::container::{hex, sha256};
use qgtl_core::{Error, Result};

use crate::GlobalArgs;

/// Effective configuration of one invocation, after flag overrides.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub scale: Scale,
    pub out: PathBuf,
    pub threads: usize,
    pub hash: [u8; 32],
    started: Instant,
}

impl Ctx {
    pub fn new(g: &GlobalArgs) -> Result<Self> {
        let mut cfg = match &g.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::builtin(),
        };
        if let Some(s) = g.seed {
            cfg.experiment.seed = s;
        }
        if let Some(s) = g.scale {
            cfg.experiment.scale = s;
        }
        if let Some(o) = &g.out {
            cfg.experiment.out = o.clone();
        }
        if g.threads == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        Ok(Ctx {
            seed: cfg.experiment.seed,
            scale: cfg.experiment.scale,
            out: cfg.experiment.out.clone(),
            threads: g.threads,
            hash: cfg.hash(),
            cfg,
            started: Instant::now(),
        })
    }

    pub fn profile(&self) -> &ScaleProfile {
        self.cfg.profile(self.scale)
    }

    pub fn case(&self, label: Option<&str>) -> Result<&CaseConfig> {
        self.cfg.case(label.unwrap_or(&self.cfg.experiment.base_case))
    }

    pub fn wall_time(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }
}

/// Output files written under a temporary name and renamed together on commit;
/// anything left uncommitted is deleted.
pub struct Staging {
    pub dir: PathBuf,
    files: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Staging {
    pub fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        Ok(Staging {
            dir,
            files: Vec::new(),
            committed: false,
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let target = self.dir.join(name);
        let partial = self.dir.join(format!("{name}.partial"));
        fs::write(&partial, bytes).map_err(|e| io(&partial, e))?;
        self.files.push((partial, target));
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.files
            .iter()
            .map(|(_, t)| t.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect()
    }

    pub fn commit(&mut self) -> Result<()> {
        for (partial, target) in &self.files {
            fs::rename(partial, target).map_err(|e| io(target, e))?;
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            for (partial, _) in &self.files {
                let _ = fs::remove_file(partial);
            }
        }
    }
}

pub fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io(path, e))
}

/// Provenance record written next to every command's outputs.
pub struct Manifest {
    command: String,
    inputs: Vec<(String, String)>,
    results: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            inputs: Vec::new(),
            results: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = hex(&sha256(&read_bytes(path)?));
        let key = path.display().to_string();
        if !self.inputs.iter().any(|(p, _)| *p == key) {
            self.inputs.push((key, digest));
        }
        Ok(())
    }

    pub fn result(&mut self, key: &str, value: impl ToString) {
        self.results.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self, ctx: &Ctx, status: &str, outputs: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {:?}", self.command);
        let _ = writeln!(s, "status = {status:?}");
        let _ = writeln!(s, "config_hash = {:?}", hex(&ctx.hash));
        let _ = writeln!(s, "seed = {}", ctx.seed);
        let _ = writeln!(s, "scale = \"{}\"", ctx.scale);
        let _ = writeln!(s, "threads = {}", ctx.threads);
        let _ = writeln!(s, "wall_time_s = {:.3}", ctx.wall_time());
        let _ = writeln!(s, "outputs = {outputs:?}");
        let _ = writeln!(s, "\n[inputs]");
        for (p, d) in &self.inputs {
            let _ = writeln!(s, "{p:?} = {d:?}");
        }
        let _ = writeln!(s, "\n[results]");
        for (k, v) in &self.results {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        s
    }

    /// Commits the staged outputs, then writes the manifest beside them.
    pub fn finish(&self, ctx: &Ctx, mut staging: Staging, status: &str) -> Result<()> {
        let outputs = staging.names();
        staging.commit()?;
        let path = staging.dir.join("manifest.toml");
        fs::write(&path, self.render(ctx, status, &outputs)).map_err(|e| io(&path, e))
    }
}
