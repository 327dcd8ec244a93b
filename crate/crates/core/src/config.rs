//! Run configuration: one TOML file with `[synth]`, `[train]`, `[eval]` and
//! `[paths]` sections, then command-line overrides, then `METASEG_SEED`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episodes::SynthConfig;
use crate::error::{Error, Result};
use crate::ridge::HeadKind;
use crate::trainer::{Precision, TrainConfig};

pub const SEED_ENV: &str = "METASEG_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    pub tasks: usize,
    pub seed: u64,
    /// Shot counts for a sweep; empty evaluates `n` only.
    pub shots: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 2,
            n: 5,
            q: 2,
            tasks: 200,
            seed: 0,
            shots: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory. When unset, the `[synth]` dataset is generated in
    /// memory.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

/// Which seed a `--seed` override replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedTarget {
    Synth,
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub precision: Option<Precision>,
    pub head: Option<HeadKind>,
    pub no_gc_branch: bool,
    pub shots: Option<Vec<usize>>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub q: Option<usize>,
    pub tasks: Option<usize>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        let e = &self.eval;
        if e.k == 0 || e.n == 0 || e.q == 0 || e.tasks == 0 {
            return Err(Error::Config(format!(
                "eval k, n, q, tasks must be positive (got {}, {}, {}, {})",
                e.k, e.n, e.q, e.tasks
            )));
        }
        if e.shots.contains(&0) {
            return Err(Error::Config("eval shots must be positive".into()));
        }
        Ok(())
    }

    /// Apply command-line overrides, then the seed from the environment.
    pub fn apply(&mut self, o: &Overrides, target: SeedTarget, env_seed: Option<&str>) -> Result<()> {
        let mut seed = o.seed;
        if let Some(s) = env_seed {
            seed = Some(
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?,
            );
        }
        if let Some(s) = seed {
            match target {
                SeedTarget::Synth => self.synth.seed = s,
                SeedTarget::Train => self.train.seed = s,
                SeedTarget::Eval => self.eval.seed = s,
            }
        }
        if let Some(p) = &o.out_dir {
            self.paths.out_dir = p.clone();
        }
        if let Some(p) = &o.data_dir {
            self.paths.data_dir = Some(p.clone());
        }
        if let Some(p) = &o.checkpoint {
            self.paths.checkpoint = Some(p.clone());
        }
        if let Some(p) = o.precision {
            self.train.precision = p;
        }
        if let Some(h) = o.head {
            self.train.head = h;
        }
        if o.no_gc_branch {
            self.train.embed.gc_branch_enabled = false;
        }
        if let Some(s) = &o.shots {
            self.eval.shots = s.clone();
        }
        for (dst, src) in [
            (&mut self.eval.k, o.k),
            (&mut self.eval.n, o.n),
            (&mut self.eval.q, o.q),
            (&mut self.eval.tasks, o.tasks),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        self.validate()
    }

    /// Load `path` (or defaults), apply overrides and the environment seed.
    pub fn resolve(path: Option<&Path>, o: &Overrides, target: SeedTarget) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let env = std::env::var(SEED_ENV).ok();
        cfg.apply(o, target, env.as_deref())?;
        Ok(cfg)
    }
}

/// Parse a comma-separated list of shot counts such as `1,5,10`.
pub fn parse_shots(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config(format!("bad shot count `{p}` in `{s}`")))
        })
        .collect()
}
