use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datagen::CtrDatasetConfig;
use crate::error::{Error, Result};
use crate::modes::ModeConfig;
use crate::sim::{Download, SimConfig, WorkerProfile};

/// A whole experiment as read from a TOML file.
///
/// ```toml
/// [model]
/// kind = "quadratic"
/// dim = 16
///
/// [mode]
/// kind = "sync"
/// workers = 4
/// local_batch = 8
///
/// [run]
/// steps = 200
/// eta = 0.05
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    pub mode: ModeConfig,
    #[serde(default)]
    pub cluster: ClusterSection,
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub switch: Option<SwitchSection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSection {
    Quadratic {
        dim: usize,
        #[serde(default = "half")]
        a_min: f64,
        #[serde(default = "one")]
        a_max: f64,
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default)]
        theta: f64,
        /// Distance scale of the starting point from the optimum.
        #[serde(default = "one")]
        init_scale: f64,
        #[serde(default)]
        problem_seed: u64,
    },
    LogisticCtr {
        #[serde(default = "four")]
        embed_dim: usize,
    },
}

fn half() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

fn four() -> usize {
    4
}

fn eight() -> usize {
    8
}

fn thousand() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Quadratic task: noise draws per epoch.
    #[serde(default = "thousand")]
    pub batches_per_epoch: usize,
    /// Number of equal slices ("days") the CTR dataset is cut into.
    #[serde(default = "eight")]
    pub days: usize,
    /// Seed of the generated CTR dataset.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ctr: Option<CtrDatasetConfig>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            batches_per_epoch: thousand(),
            days: eight(),
            seed: 0,
            ctr: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    #[serde(default)]
    pub pull_latency: f64,
    #[serde(default)]
    pub push_latency: f64,
    #[serde(default)]
    pub download: Option<Download>,
    /// Shorthand: constant seconds per batch for each worker.
    #[serde(default)]
    pub compute: Option<Vec<f64>>,
    #[serde(default)]
    pub profiles: Option<Vec<WorkerProfile>>,
}

impl ClusterSection {
    /// Profiles for `workers` workers. A single listed entry is repeated;
    /// with nothing listed every worker takes one second per batch.
    pub fn profiles(&self, workers: usize) -> Result<Vec<WorkerProfile>> {
        let listed = match (&self.compute, &self.profiles) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "cluster: give either `compute` or `profiles`, not both".into(),
                ))
            }
            (Some(c), None) => WorkerProfile::constants(c),
            (None, Some(p)) => p.clone(),
            (None, None) => vec![WorkerProfile::constant(1.0)],
        };
        let out = match listed.len() {
            1 => vec![listed[0].clone(); workers],
            n if n == workers => listed,
            n => {
                return Err(Error::Config(format!(
                    "cluster: {n} worker profiles given, mode needs {workers}"
                )))
            }
        };
        for p in &out {
            p.validate()?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Applied steps per run, counted from the starting state.
    #[serde(default)]
    pub steps: Option<u64>,
    /// Passes over the training data; unbounded when unset.
    #[serde(default)]
    pub epochs: Option<u64>,
    pub eta: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub eval_every: Option<u64>,
    #[serde(default)]
    pub record_params: bool,
    #[serde(default)]
    pub log_norms: bool,
    /// Training slice of the CTR data; evaluation uses the next one.
    #[serde(default)]
    pub day: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSection {
    pub targets: Vec<ModeConfig>,
    /// Days the base mode trains before the switch.
    #[serde(default = "one_usize")]
    pub base_days: usize,
    /// Days compared after the switch; defaults to every remaining day that
    /// has a following evaluation day.
    #[serde(default)]
    pub days: Option<usize>,
    /// Per-target step sizes; each defaults to `run.eta`.
    #[serde(default)]
    pub eta: Option<Vec<f64>>,
}

fn one_usize() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeOnly {
    mode: ModeConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Replaces the mode section with an inline TOML table such as
    /// `{ kind = "gba", local_batch = 8 }`.
    pub fn override_mode(&mut self, inline: &str) -> Result<()> {
        let parsed: ModeOnly = toml::from_str(&format!("mode = {inline}"))
            .map_err(|e| Error::Config(format!("--mode-override: {e}")))?;
        self.mode = parsed.mode;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if !(r.eta > 0.0 && r.eta.is_finite()) {
            return Err(Error::Config(format!("run.eta must be positive, got {}", r.eta)));
        }
        if r.seeds.is_empty() {
            return Err(Error::Config("run.seeds is empty".into()));
        }
        if r.steps.is_none() && r.epochs.is_none() {
            return Err(Error::Config("run needs `steps`, `epochs` or both".into()));
        }
        if r.eval_every == Some(0) {
            return Err(Error::Config("run.eval_every must be >= 1".into()));
        }
        match self.model {
            ModelSection::Quadratic {
                dim,
                a_min,
                a_max,
                sigma,
                theta,
                init_scale,
                ..
            } => {
                let ok = dim > 0
                    && a_min > 0.0
                    && a_max >= a_min
                    && sigma >= 0.0
                    && theta >= 0.0
                    && init_scale >= 0.0;
                if !ok {
                    return Err(Error::Config("model: invalid quadratic parameters".into()));
                }
                if self.data.batches_per_epoch == 0 {
                    return Err(Error::Config("data.batches_per_epoch must be positive".into()));
                }
            }
            ModelSection::LogisticCtr { embed_dim } => {
                let ctr = self
                    .data
                    .ctr
                    .as_ref()
                    .ok_or_else(|| Error::Config("model logistic-ctr needs a [data.ctr] section".into()))?;
                ctr.validate().map_err(|e| Error::Config(format!("data.ctr: {e}")))?;
                if embed_dim == 0 {
                    return Err(Error::Config("model.embed_dim must be positive".into()));
                }
                if self.data.days < 2 {
                    return Err(Error::Config("data.days must be >= 2 to hold out a day".into()));
                }
                if r.day + 1 >= self.data.days {
                    return Err(Error::Config(format!(
                        "run.day = {} leaves no evaluation day among {}",
                        r.day, self.data.days
                    )));
                }
            }
        }
        // A GBA buffer may be left for a checkpoint to determine.
        if !matches!(self.mode, ModeConfig::Gba { buffer: None, .. }) {
            self.mode.validate()?;
        }
        if let Some(sw) = &self.switch {
            if sw.targets.is_empty() {
                return Err(Error::Config("switch.targets is empty".into()));
            }
            if let Some(etas) = &sw.eta {
                if etas.len() != sw.targets.len() || etas.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                    return Err(Error::Config("switch.eta needs one positive value per target".into()));
                }
            }
        }
        self.sim_config().validate()
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            pull_latency: self.cluster.pull_latency,
            push_latency: self.cluster.push_latency,
            download: self.cluster.download,
            eval_every: self.run.eval_every,
            record_params: self.run.record_params,
            log_norms: self.run.log_norms,
        }
    }
}
