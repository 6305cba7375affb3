use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelSection};
use super::train::{train, DataSource, Start, TrainSpec};
use crate::bounds::{
    async_envelope, check_envelope, estimate_gamma, estimate_p0, gamma_prime, inflate, sync_envelope,
    AsyncBoundInputs, Envelope, GammaEstimate, SyncBoundInputs,
};
use crate::error::{Error, Result};
use crate::model::QuadraticProblem;
use crate::modes::{step_semantics, ModeConfig};
use crate::sim::Trace;

/// Problem constants of a quadratic experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub l: f64,
    pub c: f64,
    pub sigma_sq: f64,
    pub theta: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub gamma: GammaEstimate,
    pub p0: f64,
    pub gamma_inflated: f64,
    pub p0_inflated: f64,
    /// `γ'` at the raw estimates.
    pub gamma_prime: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeVerdict {
    pub pass: bool,
    pub seeds: usize,
    pub steps: usize,
    pub worst_margin: f64,
    pub worst_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub mode: String,
    /// Which bound applies: `sync` or `async`.
    pub bound: String,
    pub constants: Constants,
    /// Samples per update entering the bound (`N_s·B_s` or `M·B_a`).
    pub batch: u64,
    pub cap: f64,
    pub cap_violated: bool,
    pub measured: Option<Measured>,
    pub envelope: Option<Envelope>,
    pub check: Option<EnvelopeVerdict>,
}

impl BoundsReport {
    pub fn passed(&self) -> bool {
        !self.cap_violated && self.check.as_ref().is_none_or(|c| c.pass)
    }
}

impl fmt::Display for BoundsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = &self.constants;
        writeln!(f, "mode            {} ({} bound)", self.mode, self.bound)?;
        writeln!(
            f,
            "constants       L={} c={} sigma^2={} Theta={} eta={}",
            k.l, k.c, k.sigma_sq, k.theta, k.eta
        )?;
        writeln!(f, "update batch    {}", self.batch)?;
        writeln!(
            f,
            "step cap        {:.6e}{}",
            self.cap,
            if self.cap_violated { "  VIOLATED" } else { "" }
        )?;
        if let Some(m) = &self.measured {
            writeln!(
                f,
                "measured        gamma={:.6} p0={:.6} zeta={:.6} gamma'={:.6}",
                m.gamma.gamma, m.p0, m.gamma.zeta, m.gamma_prime
            )?;
            writeln!(f, "inflated        gamma={:.6} p0={:.6}", m.gamma_inflated, m.p0_inflated)?;
        }
        if let Some(e) = &self.envelope {
            writeln!(f, "envelope        E0={:.6e} floor={:.6e} rate={:.9}", e.e0, e.floor, e.rate)?;
        }
        if let Some(c) = &self.check {
            writeln!(
                f,
                "envelope check  {} over {} seeds x {} steps (worst margin {:.3e} at step {})",
                if c.pass { "PASS" } else { "FAIL" },
                c.seeds,
                c.steps,
                c.worst_margin,
                c.worst_step
            )?;
        }
        Ok(())
    }
}

pub fn constants(cfg: &ExperimentConfig) -> Result<Constants> {
    match cfg.model {
        ModelSection::Quadratic {
            a_min,
            a_max,
            sigma,
            theta,
            ..
        } => Ok(Constants {
            l: a_max,
            c: a_min,
            sigma_sq: sigma * sigma,
            theta,
            eta: cfg.run.eta,
        }),
        ModelSection::LogisticCtr { .. } => Err(Error::Config("bounds need the quadratic model".into())),
    }
}

/// Staleness constants measured over `traces`: the largest `γ̂` and the
/// smallest `p̂0`, then inflated.
pub fn measure(traces: &[Trace], problem: &QuadraticProblem) -> Result<Measured> {
    let mut gamma: Option<GammaEstimate> = None;
    let mut p0 = f64::INFINITY;
    for t in traces {
        let g = estimate_gamma(t, problem)?;
        gamma = Some(match gamma {
            Some(prev) if prev.gamma >= g.gamma => prev,
            _ => g,
        });
        p0 = p0.min(estimate_p0(&t.reports)?);
    }
    let gamma = gamma.ok_or_else(|| Error::Argument("no traces to measure".into()))?;
    let (gi, pi) = inflate(gamma.gamma, p0);
    Ok(Measured {
        gamma_prime: gamma_prime(gamma.gamma.min(1.0), p0)?,
        gamma,
        p0,
        gamma_inflated: gi,
        p0_inflated: pi,
    })
}

/// Bound report for the configured mode. Every configured seed is run with
/// per-step evaluation to check the envelope; non-synchronous modes measure
/// `γ̂` and `p̂0` from those runs unless `trace` supplies them.
pub fn cmd_bounds(cfg: &ExperimentConfig, trace: Option<&Trace>) -> Result<BoundsReport> {
    let k = constants(cfg)?;
    let source = DataSource::from_config(cfg)?;
    let DataSource::Quadratic { problem, .. } = &source else {
        unreachable!("constants() accepted the model");
    };
    let mode = cfg.mode;
    let policy = step_semantics(&mode)?;
    let is_sync = matches!(mode, ModeConfig::Sync { .. });
    let batch = (policy.trigger * policy.local_batch) as u64;
    let sync_inputs = SyncBoundInputs {
        l: k.l,
        c: k.c,
        sigma_sq: k.sigma_sq,
        theta: k.theta,
        eta: k.eta,
        n_s: policy.workers as u64,
        b_s: policy.local_batch as u64,
    };
    let cap = if is_sync {
        sync_inputs.cap()
    } else {
        crate::bounds::step_cap(k.l, k.theta, batch)
    };
    let mut report = BoundsReport {
        mode: mode.name().to_string(),
        bound: if is_sync { "sync" } else { "async" }.to_string(),
        constants: k,
        batch,
        cap,
        cap_violated: k.eta > cap,
        measured: None,
        envelope: None,
        check: None,
    };
    if report.cap_violated {
        if let Some(t) = trace {
            report.measured = Some(measure(std::slice::from_ref(t), problem)?);
        }
        return Ok(report);
    }

    let mut sim = cfg.sim_config();
    sim.eval_every = Some(1);
    sim.record_params = !is_sync || trace.is_none();
    let mut traces = Vec::new();
    for &seed in &cfg.run.seeds {
        let mut spec = TrainSpec::from_config(cfg, seed, Start::Fresh)?;
        spec.sim = sim.clone();
        traces.push(train(&source, spec)?.trace);
    }
    let curves: Vec<Vec<f64>> = traces.iter().map(|t| t.evals.iter().map(|e| e.loss).collect()).collect();
    let e0 = curves.iter().map(|c| c[0]).sum::<f64>() / curves.len() as f64;

    report.measured = Some(match trace {
        Some(t) => measure(std::slice::from_ref(t), problem)?,
        None => measure(&traces, problem)?,
    });
    let env = if is_sync {
        sync_envelope(e0, &sync_inputs)?
    } else {
        let m = report.measured.as_ref().expect("measured above");
        async_envelope(
            e0,
            &AsyncBoundInputs {
                l: k.l,
                c: k.c,
                sigma_sq: k.sigma_sq,
                theta: k.theta,
                eta: k.eta,
                gamma: m.gamma_inflated,
                p0: m.p0_inflated,
                m: policy.trigger as u64,
                b_a: policy.local_batch as u64,
                sparsity: None,
            },
        )?
    };
    let check = check_envelope(&curves, &env)?;
    report.envelope = Some(env);
    report.check = Some(EnvelopeVerdict {
        pass: check.pass,
        seeds: curves.len(),
        steps: check.mean.len(),
        worst_margin: check.worst_margin,
        worst_step: check.worst_step,
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: &str, eta: f64) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
[model]
kind = "quadratic"
dim = 4
sigma = 1.0

[mode]
{mode}

[run]
steps = 100
eta = {eta}
seeds = [0, 1, 2, 3]
"#
        ))
        .unwrap()
    }

    #[test]
    fn sync_with_zero_theta_reports_half_over_l() {
        let r = cmd_bounds(&cfg("kind = \"sync\"\nworkers = 2\nlocal_batch = 4", 0.05), None).unwrap();
        assert_eq!(r.cap, 0.5);
        assert!(!r.cap_violated);
        let m = r.measured.as_ref().unwrap();
        assert_eq!(m.gamma.gamma, 0.0);
        assert_eq!(m.p0, 1.0);
        assert_eq!(m.gamma_prime, 1.5);
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn cap_violation_is_surfaced() {
        let r = cmd_bounds(&cfg("kind = \"sync\"\nworkers = 2\nlocal_batch = 4", 0.9), None).unwrap();
        assert!(r.cap_violated);
        assert!(!r.passed());
        assert!(r.to_string().contains("VIOLATED"));
    }

    #[test]
    fn async_modes_measure_staleness() {
        let r = cmd_bounds(&cfg("kind = \"async\"\nworkers = 3\nlocal_batch = 4", 0.05), None).unwrap();
        assert_eq!(r.bound, "async");
        let m = r.measured.as_ref().unwrap();
        assert!(m.p0 < 1.0 && m.gamma.gamma > 0.0, "{m:?}");
        assert!(r.check.is_some());
    }
}
