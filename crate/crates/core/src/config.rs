//! Run configuration: one JSON document, unknown keys rejected.
//!
//! Precedence for every setting is command-line flag, then config file,
//! then environment (`PREFDYN_OUT` for the output directory), then default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GeneratorSpec;
use crate::error::{Error, Result};
use crate::trainer::{Method, SpoConfig};
use crate::verify::VerifyOptions;

pub const OUT_ENV: &str = "PREFDYN_OUT";
pub const DEFAULT_OUT: &str = "prefdyn-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub generator: GeneratorSpec,
    /// Task definition file (`generator = "file"`).
    pub path: Option<PathBuf>,
    /// Preference triples, JSONL.
    pub triples: Option<PathBuf>,
    /// SFT pairs, JSONL.
    pub sft: Option<PathBuf>,
    /// Starting policy snapshot, e.g. the output of an earlier SFT run.
    pub policy: Option<PathBuf>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::Probe,
            path: None,
            triples: None,
            sft: None,
            policy: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Gamma,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub gradient_instances: usize,
    pub loss_instances: usize,
    pub audit_instances: usize,
    pub tabular_instances: usize,
    pub richardson_instances: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        let d = VerifyOptions::default();
        Self {
            gradient_instances: d.gradient_instances,
            loss_instances: d.loss_instances,
            audit_instances: d.audit_instances,
            tabular_instances: d.tabular_instances,
            richardson_instances: d.richardson_instances,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub method: Method,
    pub task: TaskSpec,
    pub spo: SpoConfig,
    pub out_dir: Option<PathBuf>,
    /// Trajectory length for `dynamics`; defaults to `spo.T`.
    pub steps: Option<usize>,
    pub n_samples: usize,
    pub top_k: usize,
    pub sweep: Option<SweepSpec>,
    pub verify: VerifySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            method: Method::Spo,
            task: TaskSpec::default(),
            spo: SpoConfig::default(),
            out_dir: None,
            steps: None,
            n_samples: 500,
            top_k: 5,
            sweep: None,
            verify: VerifySettings::default(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, applies overrides, resolves paths against the file's
    /// directory and validates.
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.apply(ov, std::env::var_os(OUT_ENV).map(PathBuf::from));
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.task.path);
        fix(&mut self.task.triples);
        fix(&mut self.task.sft);
        fix(&mut self.task.policy);
        fix(&mut self.out_dir);
    }

    /// Flags win over the file; the environment only fills an unset output
    /// directory.
    pub fn apply(&mut self, ov: &Overrides, env_out: Option<PathBuf>) {
        if let Some(s) = ov.seed {
            self.spo.seed = s;
        }
        if let Some(m) = ov.method {
            self.method = m;
        }
        if let Some(o) = &ov.out {
            self.out_dir = Some(o.clone());
        } else if self.out_dir.is_none() {
            self.out_dir = env_out;
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("name must be nonempty".into()));
        }
        self.spo.validate()?;
        if self.top_k == 0 || self.n_samples == 0 {
            return Err(Error::Config("n_samples and top_k must be positive".into()));
        }
        if self.steps == Some(0) {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep.values must be nonempty".into()));
            }
            if s.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config("sweep values must be nonnegative".into()));
            }
        }
        match self.task.generator {
            GeneratorSpec::File if self.task.path.is_none() => Err(Error::Config(
                "task.path is required for generator \"file\"".into(),
            )),
            GeneratorSpec::Random => Err(Error::Config(
                "generator \"random\" is only used internally by verify".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn verify_options(&self) -> VerifyOptions {
        let v = &self.verify;
        VerifyOptions {
            seed: self.spo.seed,
            gradient_instances: v.gradient_instances,
            loss_instances: v.loss_instances,
            audit_instances: v.audit_instances,
            tabular_instances: v.tabular_instances,
            richardson_instances: v.richardson_instances,
            ..Default::default()
        }
    }
}
