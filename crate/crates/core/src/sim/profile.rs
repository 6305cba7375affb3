use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Per-batch compute time in simulated seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ComputeTime {
    Constant { seconds: f64 },
    Uniform { low: f64, high: f64 },
    Lognormal { median: f64, sigma: f64 },
}

impl ComputeTime {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ComputeTime::Constant { seconds } => seconds > 0.0 && seconds.is_finite(),
            ComputeTime::Uniform { low, high } => low > 0.0 && high >= low && high.is_finite(),
            ComputeTime::Lognormal { median, sigma } => {
                median > 0.0 && median.is_finite() && sigma >= 0.0 && sigma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid compute time {self:?}")))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ComputeTime::Constant { seconds } => seconds,
            ComputeTime::Uniform { low, high } if low == high => low,
            ComputeTime::Uniform { low, high } => rng.random_range(low..high),
            ComputeTime::Lognormal { median, sigma } => LogNormal::new(median.ln(), sigma)
                .expect("validated lognormal")
                .sample(rng),
        }
    }

    /// Expected per-batch time.
    pub fn mean(&self) -> f64 {
        match *self {
            ComputeTime::Constant { seconds } => seconds,
            ComputeTime::Uniform { low, high } => 0.5 * (low + high),
            ComputeTime::Lognormal { median, sigma } => median * (0.5 * sigma * sigma).exp(),
        }
    }
}

/// Multiplier in force from `start` until the next piece begins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slowdown {
    pub start: f64,
    pub factor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureWindow {
    pub fail_at: f64,
    /// `None` is a permanent failure.
    #[serde(default)]
    pub recover_at: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerProfile {
    pub compute: ComputeTime,
    #[serde(default)]
    pub slowdown: Vec<Slowdown>,
    #[serde(default)]
    pub failures: Vec<FailureWindow>,
}

impl WorkerProfile {
    pub fn constant(seconds: f64) -> Self {
        Self {
            compute: ComputeTime::Constant { seconds },
            slowdown: Vec::new(),
            failures: Vec::new(),
        }
    }

    /// One constant-time profile per entry.
    pub fn constants(seconds: &[f64]) -> Vec<Self> {
        seconds.iter().map(|&s| Self::constant(s)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.compute.validate()?;
        let mut last = f64::NEG_INFINITY;
        for piece in &self.slowdown {
            if !(piece.start > last && piece.factor > 0.0 && piece.factor.is_finite()) {
                return Err(Error::Config(format!(
                    "slowdown pieces must have increasing starts and positive factors, got {piece:?}"
                )));
            }
            last = piece.start;
        }
        let mut free_from = f64::NEG_INFINITY;
        for w in &self.failures {
            if !(w.fail_at >= 0.0 && w.fail_at > free_from) {
                return Err(Error::Config(format!(
                    "failure windows must be ordered and disjoint, got {w:?}"
                )));
            }
            match w.recover_at {
                Some(r) if r > w.fail_at => free_from = r,
                Some(_) => {
                    return Err(Error::Config(format!("recovery must follow failure, got {w:?}")));
                }
                None => free_from = f64::INFINITY,
            }
        }
        Ok(())
    }

    pub fn multiplier_at(&self, t: f64) -> f64 {
        self.slowdown
            .iter()
            .take_while(|p| p.start <= t)
            .last()
            .map_or(1.0, |p| p.factor)
    }

    /// Compute time of `worker`'s `iteration`-th batch started at time `t`.
    pub fn compute_time(&self, run_seed: u64, worker: usize, iteration: u64, t: f64) -> f64 {
        let mut rng = seed::rng(run_seed, &[seed::TAG_COMPUTE, worker as u64, iteration]);
        self.compute.sample(&mut rng) * self.multiplier_at(t)
    }
}
