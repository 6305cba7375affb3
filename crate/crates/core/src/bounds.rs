//! Closed-form convergence envelopes, one-step switching bounds, and
//! estimators of the staleness constants from simulation traces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::QuadraticProblem;
use crate::ps::AggregationReport;
use crate::seed;
use crate::sim::Trace;

/// Factor applied to measured constants before building an envelope:
/// `γ̂` is multiplied by it (capped at 1), `p̂0` divided by it.
pub const INFLATION: f64 = 1.2;

fn unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Argument(format!("{name} must lie in [0, 1], got {x}")))
    }
}

/// `γ' = 1 − γ + p0/2`
pub fn gamma_prime(gamma: f64, p0: f64) -> Result<f64> {
    unit("gamma", gamma)?;
    unit("p0", p0)?;
    Ok(1.0 - gamma + p0 / 2.0)
}

/// `ρ = 1 − p1·γ − (1 − p1)·ζ·γ + p0/2`
pub fn rho(gamma: f64, zeta: f64, p0: f64, p1: f64) -> Result<f64> {
    unit("gamma", gamma)?;
    unit("zeta", zeta)?;
    unit("p0", p0)?;
    unit("p1", p1)?;
    Ok(1.0 - p1 * gamma - (1.0 - p1) * zeta * gamma + p0 / 2.0)
}

/// `floor + rate^k (E0 − floor)`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub e0: f64,
    pub floor: f64,
    pub rate: f64,
}

impl Envelope {
    pub fn at(&self, k: u64) -> f64 {
        if k == 0 {
            return self.e0;
        }
        self.floor + self.rate.powf(k as f64) * (self.e0 - self.floor)
    }

    pub fn series(&self, steps: u64) -> Vec<f64> {
        (0..=steps).map(|k| self.at(k)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sparsity {
    pub zeta: f64,
    pub p1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsyncBoundInputs {
    pub l: f64,
    pub c: f64,
    pub sigma_sq: f64,
    pub theta: f64,
    pub eta: f64,
    pub gamma: f64,
    pub p0: f64,
    pub m: u64,
    pub b_a: u64,
    /// With sparsity the composite is `ρ`, otherwise `γ'`.
    pub sparsity: Option<Sparsity>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncBoundInputs {
    pub l: f64,
    pub c: f64,
    pub sigma_sq: f64,
    pub theta: f64,
    pub eta: f64,
    pub n_s: u64,
    pub b_s: u64,
}

fn check_constants(l: f64, c: f64, sigma_sq: f64, theta: f64, eta: f64, batch: u64) -> Result<()> {
    if !(l > 0.0 && c > 0.0 && c <= l && sigma_sq >= 0.0 && theta >= 0.0 && eta > 0.0 && batch > 0)
        || ![l, c, sigma_sq, theta, eta].iter().all(|x| x.is_finite())
    {
        return Err(Error::Argument(format!(
            "need 0 < c <= L, sigma^2 >= 0, Theta >= 0, eta > 0, batch > 0; got L={l} c={c} sigma^2={sigma_sq} Theta={theta} eta={eta} batch={batch}"
        )));
    }
    Ok(())
}

/// `1 / (2L(Θ/b + 1))`
pub fn step_cap(l: f64, theta: f64, b: u64) -> f64 {
    1.0 / (2.0 * l * (theta / b as f64 + 1.0))
}

fn enforce_cap(eta: f64, upper: f64) -> Result<()> {
    if eta > upper {
        return Err(Error::CapViolation {
            eta,
            lower: 0.0,
            upper,
        });
    }
    Ok(())
}

impl AsyncBoundInputs {
    pub fn composite(&self) -> Result<f64> {
        match self.sparsity {
            Some(s) => rho(self.gamma, s.zeta, self.p0, s.p1),
            None => gamma_prime(self.gamma, self.p0),
        }
    }

    pub fn cap(&self) -> f64 {
        step_cap(self.l, self.theta, self.m * self.b_a)
    }

    pub fn floor(&self) -> Result<f64> {
        let g = self.composite()?;
        if g <= 0.0 {
            return Err(Error::Argument(format!("staleness composite must be > 0, got {g}")));
        }
        Ok(self.eta * self.l * self.sigma_sq / (2.0 * self.c * g * (self.m * self.b_a) as f64))
    }
}

impl SyncBoundInputs {
    pub fn cap(&self) -> f64 {
        step_cap(self.l, self.theta, self.n_s * self.b_s)
    }

    pub fn floor(&self) -> f64 {
        self.eta * self.l * self.sigma_sq / (2.0 * self.c * (self.n_s * self.b_s) as f64)
    }
}

/// Bound on `E F(w_k) − F*` for token-controlled asynchronous training.
pub fn async_envelope(e0: f64, inputs: &AsyncBoundInputs) -> Result<Envelope> {
    check_constants(inputs.l, inputs.c, inputs.sigma_sq, inputs.theta, inputs.eta, inputs.m * inputs.b_a)?;
    enforce_cap(inputs.eta, inputs.cap())?;
    let g = inputs.composite()?;
    Ok(Envelope {
        e0,
        floor: inputs.floor()?,
        rate: 1.0 - inputs.eta * g * inputs.c,
    })
}

/// Bound on `E F(w_k) − F*` for synchronous training.
pub fn sync_envelope(e0: f64, inputs: &SyncBoundInputs) -> Result<Envelope> {
    check_constants(inputs.l, inputs.c, inputs.sigma_sq, inputs.theta, inputs.eta, inputs.n_s * inputs.b_s)?;
    enforce_cap(inputs.eta, inputs.cap())?;
    Ok(Envelope {
        e0,
        floor: inputs.floor(),
        rate: 1.0 - inputs.eta * inputs.c,
    })
}

/// Constants of the one-step switching bounds; `n` and `b` are the worker
/// count and local batch of the mode being analyzed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchInputs {
    pub l: f64,
    pub sigma_sq: f64,
    pub theta: f64,
    pub eta: f64,
    pub gamma: f64,
    pub n: u64,
    pub b: u64,
}

impl SwitchInputs {
    fn b(&self) -> f64 {
        self.b as f64
    }

    fn n(&self) -> f64 {
        self.n as f64
    }

    /// `(1/(N·L(Θ/B+1)), 1/(2L(Θ/B+1)))`
    pub fn async_to_sync_range(&self) -> (f64, f64) {
        let s = self.l * (self.theta / self.b() + 1.0);
        (1.0 / (self.n() * s), 1.0 / (2.0 * s))
    }

    /// Coefficient of `E‖∇F(w_k)‖²` added when switching to synchronous.
    pub fn switch_gradient_coefficient(&self) -> f64 {
        let (l, eta) = (self.l, self.eta);
        l * eta * eta * self.theta / (2.0 * self.b()) + l * eta * eta / 2.0 - eta / (2.0 * self.n())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBounds {
    pub stay: f64,
    pub switch: f64,
    /// `stay <= switch`, up to rounding.
    pub ordered: bool,
}

fn ordered(stay: f64, switch: f64) -> bool {
    stay <= switch + 1e-12 * (stay.abs() + switch.abs()).max(1.0)
}

fn check_switch_inputs(i: &SwitchInputs, e_k: f64, terms: &[f64]) -> Result<()> {
    if !(i.l > 0.0 && i.sigma_sq >= 0.0 && i.theta >= 0.0 && i.eta > 0.0 && i.n > 0 && i.b > 0) {
        return Err(Error::Argument(format!("invalid switching inputs {i:?}")));
    }
    unit("gamma", i.gamma)?;
    if !e_k.is_finite() || terms.iter().any(|&g| !(g >= 0.0 && g.is_finite())) {
        return Err(Error::Argument("expected loss must be finite, gradient terms >= 0".into()));
    }
    Ok(())
}

/// One-step bounds when leaving asynchronous training: staying
/// asynchronous versus switching to synchronous at step `k+1`. `grad_sq` is
/// `E‖∇F(w_k)‖²`, `grad_tau_sq` is `E‖∇F(w_τ(k))‖²`.
pub fn switch_step_bounds_async_to_sync(
    inputs: &SwitchInputs,
    e_k: f64,
    grad_sq: f64,
    grad_tau_sq: f64,
) -> Result<StepBounds> {
    check_switch_inputs(inputs, e_k, &[grad_sq, grad_tau_sq])?;
    let (lower, upper) = inputs.async_to_sync_range();
    if !(lower <= inputs.eta && inputs.eta <= upper) {
        return Err(Error::CapViolation {
            eta: inputs.eta,
            lower,
            upper,
        });
    }
    let SwitchInputs {
        l,
        sigma_sq,
        eta,
        gamma,
        ..
    } = *inputs;
    let (n, b) = (inputs.n(), inputs.b());
    let common = e_k - eta / 2.0 * (1.0 - gamma) * grad_sq + l * eta * eta * sigma_sq / (2.0 * b);
    let stay = common - eta / 4.0 * grad_tau_sq;
    let switch = common
        + l * eta * eta * sigma_sq / (2.0 * b * n)
        + inputs.switch_gradient_coefficient() * grad_sq
        - eta / (4.0 * n) * grad_tau_sq;
    Ok(StepBounds {
        stay,
        switch,
        ordered: ordered(stay, switch),
    })
}

/// One-step bounds when leaving synchronous training: staying synchronous
/// versus switching to asynchronous at step `k+1`.
pub fn switch_step_bounds_sync_to_async(inputs: &SwitchInputs, e_k: f64, grad_sq: f64) -> Result<StepBounds> {
    check_switch_inputs(inputs, e_k, &[grad_sq])?;
    enforce_cap(inputs.eta, step_cap(inputs.l, inputs.theta, inputs.b))?;
    let SwitchInputs {
        l,
        sigma_sq,
        theta,
        eta,
        ..
    } = *inputs;
    let (n, b) = (inputs.n(), inputs.b());
    let stay = e_k - eta * (1.0 - l * eta * theta / (2.0 * n * b) - l * eta / 2.0) * grad_sq
        + l * eta * eta * sigma_sq / (2.0 * n * b);
    let switch = e_k - eta * (1.0 - l * eta * theta / (2.0 * b) - l * eta / 2.0) * grad_sq
        + l * eta * eta * sigma_sq / (2.0 * b);
    Ok(StepBounds {
        stay,
        switch,
        ordered: ordered(stay, switch),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub draws: usize,
    pub violations: usize,
}

fn random_switch_inputs<R: Rng>(rng: &mut R) -> SwitchInputs {
    SwitchInputs {
        l: rng.random_range(0.05..20.0),
        sigma_sq: rng.random_range(0.0..10.0),
        theta: rng.random_range(0.0..10.0),
        eta: 0.0,
        gamma: rng.random_range(0.0..=1.0),
        n: rng.random_range(2..=128),
        b: rng.random_range(1..=4096),
    }
}

/// Orderings of both one-step switching bounds on `draws` random admissible inputs
/// each.
pub fn switch_ordering_sweep(draws: usize, run_seed: u64) -> Result<(SweepReport, SweepReport)> {
    let mut rng = seed::rng(run_seed, &[0x7377_6570]);
    let mut a2s = SweepReport::default();
    let mut s2a = SweepReport::default();
    for _ in 0..draws {
        let mut i = random_switch_inputs(&mut rng);
        let (lo, hi) = i.async_to_sync_range();
        i.eta = rng.random_range(lo..=hi);
        let e_k = rng.random_range(0.0..100.0);
        let g = rng.random_range(0.0..100.0);
        let gt = rng.random_range(0.0..100.0);
        a2s.draws += 1;
        if !switch_step_bounds_async_to_sync(&i, e_k, g, gt)?.ordered {
            a2s.violations += 1;
        }
        let mut j = random_switch_inputs(&mut rng);
        j.n = rng.random_range(1..=128);
        j.eta = rng.random_range(0.0..=step_cap(j.l, j.theta, j.b));
        if j.eta == 0.0 {
            j.eta = step_cap(j.l, j.theta, j.b);
        }
        s2a.draws += 1;
        if !switch_step_bounds_sync_to_async(&j, rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))?
            .ordered
        {
            s2a.violations += 1;
        }
    }
    Ok((a2s, s2a))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// 1 for dense-only runs; otherwise the fraction of rows carried by stale
    /// gradients that were updated between pull and apply.
    pub zeta: f64,
    pub entries: usize,
    /// Aggregations skipped because `∇F(w_k) = 0`.
    pub excluded_steps: usize,
}

/// `max ‖∇F(w_k) − ∇F(w_pull)‖² / ‖∇F(w_k)‖²` over every surviving entry,
/// using the dense parameter history recorded in the trace.
pub fn estimate_gamma(trace: &Trace, problem: &QuadraticProblem) -> Result<GammaEstimate> {
    if trace.param_history.is_empty() {
        return Err(Error::LoggingNotEnabled("parameter history".into()));
    }
    let first = trace.summary.first_step;
    let at = |step: u64| -> Result<&crate::model::DenseVector> {
        step.checked_sub(first)
            .and_then(|i| trace.param_history.get(i as usize))
            .ok_or_else(|| Error::Argument(format!("no recorded parameters for step {step}")))
    };
    let mut gamma: f64 = 0.0;
    let mut entries = 0;
    let mut excluded = 0;
    let (mut touched, mut stale) = (0u64, 0u64);
    for rep in &trace.reports {
        let gk = problem.grad_at(at(rep.step)?)?;
        let denom = gk.norm_sq();
        for e in rep.entries.iter().filter(|e| e.staleness > 0) {
            touched += u64::from(e.ids_touched);
            stale += u64::from(e.ids_stale);
        }
        if denom == 0.0 {
            excluded += 1;
            continue;
        }
        for e in rep.entries.iter().filter(|e| e.kept) {
            entries += 1;
            if e.pull_step == rep.step {
                continue;
            }
            let gp = problem.grad_at(at(e.pull_step)?)?;
            gamma = gamma.max(gk.dist_sq(&gp) / denom);
        }
    }
    Ok(GammaEstimate {
        gamma,
        zeta: if touched == 0 { 1.0 } else { stale as f64 / touched as f64 },
        entries,
        excluded_steps: excluded,
    })
}

/// Fraction of aggregated entries computed at the step they were applied to.
pub fn estimate_p0(reports: &[AggregationReport]) -> Result<f64> {
    let total: usize = reports.iter().map(|r| r.entries.len()).sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("no aggregated entries".into()));
    }
    let fresh = reports
        .iter()
        .flat_map(|r| r.entries.iter().map(move |e| e.pull_step == r.step))
        .filter(|&f| f)
        .count();
    Ok(fresh as f64 / total as f64)
}

/// `(min(1, γ̂·INFLATION), p̂0 / INFLATION)`
pub fn inflate(gamma: f64, p0: f64) -> (f64, f64) {
    ((gamma * INFLATION).min(1.0), p0 / INFLATION)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    pub pass: bool,
    /// `min_k (envelope(k) + 3·stderr_k − mean_k)`.
    pub worst_margin: f64,
    pub worst_step: u64,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Mean error curve over seeds (each `errors[s][k]` is seed `s` at step
/// `k`) against `envelope`, allowing three standard errors.
pub fn check_envelope(errors: &[Vec<f64>], envelope: &Envelope) -> Result<EnvelopeCheck> {
    let Some(len) = errors.first().map(Vec::len) else {
        return Err(Error::Argument("no error curves".into()));
    };
    if errors.iter().any(|e| e.len() != len) {
        return Err(Error::Argument("error curves differ in length".into()));
    }
    let n = errors.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut stderr = Vec::with_capacity(len);
    let mut worst = (f64::INFINITY, 0u64);
    for k in 0..len {
        let m = errors.iter().map(|e| e[k]).sum::<f64>() / n;
        let se = if errors.len() > 1 {
            (errors.iter().map(|e| (e[k] - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        let margin = envelope.at(k as u64) + 3.0 * se - m;
        if margin < worst.0 {
            worst = (margin, k as u64);
        }
        mean.push(m);
        stderr.push(se);
    }
    Ok(EnvelopeCheck {
        pass: worst.0 >= 0.0,
        worst_margin: worst.0,
        worst_step: worst.1,
        mean,
        stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn gamma_prime_examples() {
        assert_eq!(gamma_prime(1.0, 0.0).unwrap(), 0.0);
        assert!(close(gamma_prime(0.5, 0.2).unwrap(), 0.6, 1e-15));
        assert_eq!(gamma_prime(0.0, 1.0).unwrap(), 1.5);
        assert!(gamma_prime(1.5, 0.0).is_err());
        assert!(gamma_prime(0.5, -0.1).is_err());
    }

    #[test]
    fn rho_examples() {
        assert_eq!(rho(0.3, 0.4, 0.5, 1.0).unwrap(), gamma_prime(0.3, 0.5).unwrap());
        assert_eq!(rho(0.3, 1.0, 0.5, 0.2).unwrap(), gamma_prime(0.3, 0.5).unwrap());
        assert!(close(rho(0.5, 0.2, 0.2, 0.4).unwrap(), 0.84, 1e-15));
    }

    fn async_inputs() -> AsyncBoundInputs {
        AsyncBoundInputs {
            l: 1.0,
            c: 0.5,
            sigma_sq: 1.0,
            theta: 0.0,
            eta: 0.1,
            gamma: 0.5,
            p0: 0.2,
            m: 4,
            b_a: 8,
            sparsity: None,
        }
    }

    fn sync_inputs() -> SyncBoundInputs {
        SyncBoundInputs {
            l: 1.0,
            c: 0.5,
            sigma_sq: 1.0,
            theta: 0.0,
            eta: 0.1,
            n_s: 4,
            b_s: 8,
        }
    }

    #[test]
    fn async_envelope_examples() {
        let env = async_envelope(3.0, &async_inputs()).unwrap();
        assert_eq!(env.at(0), 3.0);
        assert!(close(env.floor, 0.1 / (2.0 * 0.5 * 0.6 * 32.0), 1e-15));
        assert!((env.floor - 5.208e-3).abs() < 1e-6);
        assert!((env.at(100_000) - env.floor).abs() < 1e-15);
        let too_big = AsyncBoundInputs {
            eta: 0.6,
            ..async_inputs()
        };
        match async_envelope(1.0, &too_big) {
            Err(Error::CapViolation { upper, .. }) => assert_eq!(upper, 0.5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sync_envelope_examples() {
        let env = sync_envelope(2.0, &sync_inputs()).unwrap();
        assert_eq!(env.at(0), 2.0);
        assert_eq!(env.floor, 0.1 / 32.0);
        let doubled = sync_envelope(
            2.0,
            &SyncBoundInputs {
                b_s: 16,
                ..sync_inputs()
            },
        )
        .unwrap();
        assert_eq!(doubled.floor * 2.0, env.floor);
        assert_eq!(sync_inputs().cap(), 0.5);
    }

    #[test]
    fn envelope_below_floor_rises() {
        let env = sync_envelope(0.0, &sync_inputs()).unwrap();
        let s = env.series(50);
        assert!(s.windows(2).all(|w| w[1] >= w[0]));
        assert!(s[50] <= env.floor);
    }

    #[test]
    fn noise_free_isotropic_gd_under_envelope() {
        // F = c/2 ‖w‖², w ← (1 − ηc) w, so the error is (1 − ηc)^{2k} E0.
        let (c, eta) = (0.8, 0.3);
        let inputs = SyncBoundInputs {
            l: c,
            c,
            sigma_sq: 0.0,
            theta: 0.0,
            eta,
            n_s: 1,
            b_s: 1,
        };
        let mut w = 2.0f64;
        let e0 = 0.5 * c * w * w;
        let env = sync_envelope(e0, &inputs).unwrap();
        assert_eq!(env.floor, 0.0);
        let mut errors = vec![e0];
        for _ in 0..60 {
            w -= eta * c * w;
            errors.push(0.5 * c * w * w);
        }
        let check = check_envelope(&[errors.clone()], &env).unwrap();
        assert!(check.pass);
        for (k, e) in errors.iter().enumerate() {
            assert!(close(*e, e0 * (1.0 - eta * c).powi(2 * k as i32), 1e-12));
        }
    }

    #[test]
    fn check_envelope_flags_excursions() {
        let env = Envelope {
            e0: 1.0,
            floor: 0.0,
            rate: 0.5,
        };
        let ok = vec![vec![1.0, 0.5, 0.25]; 3];
        assert!(check_envelope(&ok, &env).unwrap().pass);
        let bad = vec![vec![1.0, 0.6, 0.25]; 3];
        let r = check_envelope(&bad, &env).unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst_step, 1);
        assert!(close(r.worst_margin, -0.1, 1e-12));
    }

    fn switch_inputs(n: u64) -> SwitchInputs {
        SwitchInputs {
            l: 1.0,
            sigma_sq: 1.0,
            theta: 0.0,
            eta: 0.1,
            gamma: 0.5,
            n,
            b: 8,
        }
    }

    #[test]
    fn async_to_sync_lower_cap_zeroes_gradient_coefficient() {
        let i = SwitchInputs {
            eta: 1.0 / 8.0,
            ..switch_inputs(8)
        };
        assert_eq!(i.switch_gradient_coefficient(), 0.0);
        let b = switch_step_bounds_async_to_sync(&i, 1.0, 2.0, 3.0).unwrap();
        assert!(b.ordered);
        let direct_stay = 1.0 - i.eta / 2.0 * 0.5 * 2.0 + i.eta * i.eta / 16.0 - i.eta / 4.0 * 3.0;
        assert!(close(b.stay, direct_stay, 1e-15));
    }

    #[test]
    fn async_to_sync_single_worker_has_no_admissible_rate() {
        let i = switch_inputs(1);
        let (lo, hi) = i.async_to_sync_range();
        assert!(lo > hi);
        assert!(matches!(
            switch_step_bounds_async_to_sync(&i, 1.0, 1.0, 1.0),
            Err(Error::CapViolation { .. })
        ));
    }

    #[test]
    fn sync_to_async_degenerate_cases() {
        let one = switch_step_bounds_sync_to_async(&switch_inputs(1), 1.0, 2.0).unwrap();
        assert_eq!(one.stay, one.switch);
        let quiet = SwitchInputs {
            sigma_sq: 0.0,
            ..switch_inputs(16)
        };
        let q = switch_step_bounds_sync_to_async(&quiet, 1.0, 2.0).unwrap();
        assert_eq!(q.stay, q.switch);
        let over = SwitchInputs {
            eta: 0.6,
            ..switch_inputs(4)
        };
        assert!(switch_step_bounds_sync_to_async(&over, 1.0, 2.0).is_err());
    }

    #[test]
    fn random_sweep_has_no_violations() {
        let (a, s) = switch_ordering_sweep(1000, 11).unwrap();
        assert_eq!((a.draws, a.violations), (1000, 0));
        assert_eq!((s.draws, s.violations), (1000, 0));
    }

    #[test]
    fn p0_counting() {
        use crate::ps::{EntryReport, Token};
        let entry = |pull_step| EntryReport {
            worker: 0,
            token: Token(pull_step),
            pull_step,
            staleness: 4 - pull_step,
            kept: true,
            ids_touched: 0,
            ids_stale: 0,
        };
        let rep = AggregationReport {
            step: 4,
            surviving: 8,
            dropped: 0,
            entries: [4, 4, 4, 3, 3, 2, 1, 0].into_iter().map(entry).collect(),
            norm: 0.0,
        };
        assert_eq!(estimate_p0(&[rep]).unwrap(), 0.375);
        assert!(estimate_p0(&[]).is_err());
    }

    #[test]
    fn inflation_direction() {
        assert_eq!(inflate(0.5, 0.6), (0.6, 0.5));
        assert_eq!(inflate(0.95, 0.0).0, 1.0);
    }

    proptest! {
        #[test]
        fn rho_dominates_gamma_prime(g in 0.0f64..=1.0, z in 0.0f64..=1.0, p0 in 0.0f64..=1.0, p1 in 0.0f64..=1.0) {
            let r = rho(g, z, p0, p1).unwrap();
            let gp = gamma_prime(g, p0).unwrap();
            prop_assert!(r >= gp - 1e-15);
            prop_assert!((r - gp - (1.0 - p1) * g * (1.0 - z)).abs() < 1e-12);
        }

        #[test]
        fn floors_scale_inversely_with_global_batch(
            m in 1u64..64, b in 1u64..256, eta in 1e-4f64..0.05, g in 0.0f64..0.9, p0 in 0.0f64..=1.0,
        ) {
            let a = AsyncBoundInputs { eta, gamma: g, p0, m, b_a: b, ..async_inputs() };
            let a2 = AsyncBoundInputs { m: 2 * m, ..a };
            prop_assert!(close(a.floor().unwrap(), 2.0 * a2.floor().unwrap(), 1e-14));
            let s = SyncBoundInputs { eta, n_s: m, b_s: b, ..sync_inputs() };
            let s2 = SyncBoundInputs { b_s: 2 * b, ..s };
            prop_assert!(close(s.floor(), 2.0 * s2.floor(), 1e-14));
            let sparse = AsyncBoundInputs { sparsity: Some(Sparsity { zeta: 0.3, p1: 0.5 }), ..a };
            prop_assert!(sparse.floor().unwrap() <= a.floor().unwrap() * (1.0 + 1e-12));
        }

        #[test]
        fn envelopes_start_at_e0(e0 in 0.0f64..100.0, eta in 1e-4f64..0.5, g in 0.0f64..0.9, p0 in 0.0f64..=1.0) {
            let a = AsyncBoundInputs { eta, gamma: g, p0, ..async_inputs() };
            prop_assert_eq!(async_envelope(e0, &a).unwrap().at(0), e0);
            let s = SyncBoundInputs { eta, ..sync_inputs() };
            prop_assert_eq!(sync_envelope(e0, &s).unwrap().at(0), e0);
        }
    }
}
