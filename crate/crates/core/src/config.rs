//! Run configuration file.
//!
//! A single TOML document with a `version` key. Every section is optional and
//! falls back to the defaults below; agent sections only list the fields
//! they override.
//!
//! ```toml
//! version = 1
//! seed = 0
//! n_runs = 5
//! out_dir = "runs/default"
//! algorithms = ["bc", "conformal_dqn", "cql", "ddqn"]
//! split_ratios = [0.6, 0.1, 0.1, 0.2]
//! ood_percentile = 0.01
//! survival_bins = 10
//! episode_format = "binary"
//!
//! [sim]
//! n_patients = 10000
//!
//! [agents.conformal_dqn]
//! max_steps = 30000
//!
//! [fqe]
//! iterations = 20
//! ```
//!
//! Seeds: run `r` trains with `derive_seed(seed, r)`; its evaluators use
//! `derive_seed(derive_seed(seed, r), 1)`; the patient split uses
//! `derive_seed(sim.seed, SPLIT_STREAM)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, Algorithm};
use crate::error::{Error, Result};
use crate::eval::{FqeConfig, DEFAULT_SURVIVAL_BINS};
use crate::io_util::read_artifact;
use crate::mdp::impute::ImputeConfig;
use crate::mdp::ood::DEFAULT_OOD_PERCENTILE;
use crate::mdp::split::DEFAULT_SPLIT_RATIOS;
use crate::rng::derive_seed;
use crate::sim::SimConfig;

pub const CONFIG_VERSION: u32 = 1;
/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "CONFDQN_OUT";
pub const SPLIT_STREAM: u64 = 0x5350_4c49_54;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeFormat {
    Binary,
    Csv,
}

impl EpisodeFormat {
    pub fn extension(self) -> &'static str {
        match self {
            EpisodeFormat::Binary => "cdqe",
            EpisodeFormat::Csv => "csv",
        }
    }
}

/// Per-algorithm overrides of [`AgentConfig::new`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sync_interval: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cql_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logit_l2_coeff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
}

impl AgentOverrides {
    pub fn apply(&self, mut cfg: AgentConfig) -> AgentConfig {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    cfg.$f = v.clone();
                }
            )*};
        }
        take!(lr, gamma, batch_size, max_steps, sync_interval, cql_weight, logit_l2_coeff, alpha, hidden);
        cfg
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSections {
    pub ddqn: AgentOverrides,
    pub conformal_dqn: AgentOverrides,
    pub cql: AgentOverrides,
    pub bc: AgentOverrides,
}

impl AgentSections {
    pub fn get(&self, alg: Algorithm) -> &AgentOverrides {
        match alg {
            Algorithm::Ddqn => &self.ddqn,
            Algorithm::ConformalDqn => &self.conformal_dqn,
            Algorithm::Cql => &self.cql,
            Algorithm::Bc => &self.bc,
        }
    }

    pub fn get_mut(&mut self, alg: Algorithm) -> &mut AgentOverrides {
        match alg {
            Algorithm::Ddqn => &mut self.ddqn,
            Algorithm::ConformalDqn => &mut self.conformal_dqn,
            Algorithm::Cql => &mut self.cql,
            Algorithm::Bc => &mut self.bc,
        }
    }

    /// Applies the same override to every algorithm.
    pub fn set_all(&mut self, f: impl Fn(&mut AgentOverrides)) {
        for a in Algorithm::ALL {
            f(self.get_mut(a));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub n_runs: usize,
    pub out_dir: PathBuf,
    /// Algorithms trained and evaluated, in any order.
    pub algorithms: Vec<Algorithm>,
    pub split_ratios: [f64; 4],
    pub ood_percentile: f64,
    pub survival_bins: usize,
    pub episode_format: EpisodeFormat,
    pub sim: SimConfig,
    pub impute: ImputeConfig,
    pub agents: AgentSections,
    pub fqe: FqeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            n_runs: 5,
            out_dir: PathBuf::from("runs/default"),
            algorithms: Algorithm::ALL.to_vec(),
            split_ratios: DEFAULT_SPLIT_RATIOS,
            ood_percentile: DEFAULT_OOD_PERCENTILE,
            survival_bins: DEFAULT_SURVIVAL_BINS,
            episode_format: EpisodeFormat::Binary,
            sim: SimConfig::default(),
            impute: ImputeConfig::default(),
            agents: AgentSections::default(),
            fqe: FqeConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small networks, short schedules and fewer patients; runs end to end
    /// in minutes on one core.
    pub fn desk() -> Self {
        let mut cfg = Self {
            n_runs: 2,
            out_dir: PathBuf::from("runs/desk"),
            ..Self::default()
        };
        cfg.sim.n_patients = 1500;
        cfg.agents.set_all(|o| {
            o.hidden = Some(vec![64, 64]);
            o.max_steps = Some(2000);
            o.sync_interval = Some(1000);
        });
        cfg.fqe = FqeConfig {
            iterations: 20,
            steps_per_iteration: 100,
            batch_size: 128,
            hidden: vec![64],
            ..FqeConfig::default()
        };
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; a missing file is a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_artifact(path).map_err(|e| match e {
            Error::MissingArtifact(p) => Error::ConfigParse(format!("config file {} not found", p.display())),
            other => other,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be positive".into()));
        }
        if !(self.ood_percentile > 0.0 && self.ood_percentile < 0.5) {
            return Err(Error::Config(format!("ood_percentile {} outside (0, 0.5)", self.ood_percentile)));
        }
        if self.survival_bins < 2 {
            return Err(Error::Config("survival_bins must be at least 2".into()));
        }
        let mut algs = self.algorithms.clone();
        algs.sort();
        algs.dedup();
        if algs.len() != self.algorithms.len() {
            return Err(Error::Config("algorithms must not repeat".into()));
        }
        let total: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| !(*r > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {:?} must be positive and sum to 1", self.split_ratios)));
        }
        self.sim.validate()?;
        self.fqe.validate()?;
        for a in Algorithm::ALL {
            self.agent_config(a, 0).validate()?;
        }
        Ok(())
    }

    /// De-duplicated algorithm list ordered by name.
    pub fn algorithms_sorted(&self) -> Vec<Algorithm> {
        let mut a = self.algorithms.clone();
        a.sort_by_key(|x| x.name());
        a.dedup();
        a
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, run as u64)
    }

    pub fn agent_config(&self, alg: Algorithm, run: usize) -> AgentConfig {
        let mut cfg = self.agents.get(alg).apply(AgentConfig::new(alg));
        cfg.seed = self.run_seed(run);
        cfg
    }

    pub fn fqe_config(&self, run: usize) -> FqeConfig {
        FqeConfig {
            seed: derive_seed(self.run_seed(run), 1),
            ..self.fqe.clone()
        }
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.sim.seed, SPLIT_STREAM)
    }

    /// Output directory after the environment override.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }

    /// Fixes `out_dir` with precedence flag, then environment, then file.
    pub fn set_out_dir(&mut self, flag: Option<PathBuf>) {
        self.out_dir = flag.unwrap_or_else(|| self.resolved_out_dir());
    }

    /// Config for one command invocation: the file (or defaults when none is
    /// given), then `seed` for both the global and simulator seeds, then the
    /// output-directory precedence.
    pub fn for_invocation(path: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = seed {
            cfg.seed = seed;
            cfg.sim.seed = seed;
        }
        cfg.set_out_dir(out);
        Ok(cfg)
    }

    /// Significance level used for calibration.
    pub fn alpha(&self) -> f64 {
        self.agent_config(Algorithm::ConformalDqn, 0).alpha
    }
}
