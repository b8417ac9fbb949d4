use std::path::{Path, PathBuf};
use std::time::Instant;

use ptm_core::models::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::GlobalOpts;
use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "COMPASS_SEED";

/// Reproducibility record written beside the outputs of every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Vec<InputDigest>,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Per-invocation state: resolved seed and config plus every file read and
/// written, from which the manifest is assembled.
pub struct RunContext {
    pub opts: GlobalOpts,
    argv: Vec<String>,
    started: Instant,
    explicit_seed: Option<u64>,
    inputs: Vec<InputDigest>,
    artifacts: Vec<PathBuf>,
    config_hash: Option<String>,
    seed: Option<u64>,
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl RunContext {
    pub fn new(opts: GlobalOpts, argv: Vec<String>) -> Result<Self> {
        let explicit_seed = match opts.seed {
            Some(s) => Some(s),
            None => seed_from_env()?,
        };
        Ok(Self {
            opts,
            argv,
            started: Instant::now(),
            explicit_seed,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            config_hash: None,
            seed: None,
        })
    }

    pub fn info(&self, msg: impl AsRef<str>) {
        if !self.opts.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Config precedence: command line over config file over `base`.
    pub fn config(&mut self, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
        let mut c = match self.opts.config.clone() {
            Some(p) => ExperimentConfig::from_json(&self.read_text(&p)?)?,
            None => base.unwrap_or_default(),
        };
        c = c.with_overrides(&self.opts.overrides)?;
        if let Some(s) = self.explicit_seed {
            c.train.seed = s;
            c.stage2.seed = s;
        }
        c.validate()?;
        self.config_hash = Some(c.hash_hex()?);
        self.seed = Some(c.train.seed);
        Ok(c)
    }

    /// Seed for commands that do not build a model config.
    pub fn seed(&mut self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        let s = match self.explicit_seed {
            Some(s) => s,
            None => self.config(None)?.train.seed,
        };
        self.seed = Some(s);
        Ok(s)
    }

    pub fn read_bytes(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        if !self.inputs.iter().any(|i| i.path == path) {
            self.inputs.push(InputDigest {
                path: path.to_path_buf(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read_bytes(path)?)
            .map_err(|_| CliError::Data(format!("{} is not UTF-8", path.display())))
    }

    pub fn write(&mut self, path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
        }
        std::fs::write(path, bytes).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        self.artifacts.push(path.to_path_buf());
        Ok(())
    }

    fn manifest_path(&self) -> PathBuf {
        if let Some(p) = &self.opts.manifest {
            return p.clone();
        }
        match self.artifacts.first() {
            Some(a) => {
                let mut name = a.file_name().unwrap_or_default().to_os_string();
                name.push(".manifest.json");
                a.with_file_name(name)
            }
            None => PathBuf::from(format!(
                "ptm-{}.manifest.json",
                self.argv.get(1).map_or("run", String::as_str)
            )),
        }
    }

    /// Writes the manifest and returns its path.
    pub fn finish(&mut self) -> Result<PathBuf> {
        let seed = self.seed()?;
        let config_hash = match &self.config_hash {
            Some(h) => h.clone(),
            None => {
                self.config(None)?;
                self.config_hash.clone().unwrap_or_default()
            }
        };
        let manifest = RunManifest {
            command: self.argv.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash,
            inputs: self.inputs.clone(),
            artifacts: self.artifacts.clone(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = self.manifest_path();
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::Io(path.clone(), e))?;
        Ok(path)
    }
}
