//! Training-mode configurations and the policies they compile to.
//!
//! Every mode runs on the same parameter-server machinery in [`crate::ps`];
//! a mode only decides how many gradients trigger an update, which pulls
//! must wait, which arrivals are discarded, and how tokens are issued.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ps::Decay;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModeConfig {
    /// Barrier every step; `workers` gradients averaged at the same version.
    Sync { workers: usize, local_batch: usize },
    /// Every gradient applied on arrival.
    Async { workers: usize, local_batch: usize },
    /// Aggregate every `b2` arrivals regardless of version.
    Bsp {
        workers: usize,
        local_batch: usize,
        b2: usize,
    },
    /// Bounded staleness: worker clocks may differ by at most `b1`.
    HopBs {
        workers: usize,
        local_batch: usize,
        b1: u64,
    },
    /// Backup workers: the slowest `b3` gradients of each step are discarded.
    HopBw {
        workers: usize,
        local_batch: usize,
        b3: usize,
    },
    /// Token-controlled global-batch aggregation with buffer size `buffer`
    /// (`M`, also the worker count) and staleness tolerance `iota`
    /// (absent means unbounded). A missing `buffer` is resolved from the
    /// checkpoint being inherited.
    Gba {
        #[serde(default)]
        buffer: Option<usize>,
        local_batch: usize,
        #[serde(default)]
        iota: Option<u64>,
    },
}

/// Samples per applied update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlobalBatch(pub u64);

impl ModeConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModeConfig::Sync { .. } => "sync",
            ModeConfig::Async { .. } => "async",
            ModeConfig::Bsp { .. } => "bsp",
            ModeConfig::HopBs { .. } => "hop-bs",
            ModeConfig::HopBw { .. } => "hop-bw",
            ModeConfig::Gba { .. } => "gba",
        }
    }

    pub fn local_batch(&self) -> usize {
        match *self {
            ModeConfig::Sync { local_batch, .. }
            | ModeConfig::Async { local_batch, .. }
            | ModeConfig::Bsp { local_batch, .. }
            | ModeConfig::HopBs { local_batch, .. }
            | ModeConfig::HopBw { local_batch, .. }
            | ModeConfig::Gba { local_batch, .. } => local_batch,
        }
    }

    /// Number of workers the mode runs with; GBA uses one worker per buffer slot.
    pub fn workers(&self) -> Result<usize> {
        Ok(match *self {
            ModeConfig::Sync { workers, .. }
            | ModeConfig::Async { workers, .. }
            | ModeConfig::Bsp { workers, .. }
            | ModeConfig::HopBs { workers, .. }
            | ModeConfig::HopBw { workers, .. } => workers,
            ModeConfig::Gba { .. } => self.gba_buffer()?,
        })
    }

    fn gba_buffer(&self) -> Result<usize> {
        match *self {
            ModeConfig::Gba { buffer: Some(m), .. } => Ok(m),
            ModeConfig::Gba { buffer: None, .. } => Err(Error::Config(
                "mode.buffer is unset and no checkpoint was given to derive it from".into(),
            )),
            _ => Err(Error::Invariant("not a GBA mode".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let workers = self.workers()?;
        if workers == 0 || self.local_batch() == 0 {
            return Err(Error::Config(format!(
                "{}: worker count and local batch must be positive",
                self.name()
            )));
        }
        match *self {
            ModeConfig::Bsp { b2: 0, .. } => Err(Error::Config("bsp: b2 must be positive".into())),
            ModeConfig::HopBw { b3, workers, .. } if b3 >= workers => Err(Error::Config(format!(
                "hop-bw: b3 = {b3} must be below the worker count {workers}"
            ))),
            _ => Ok(()),
        }
    }

    /// Fills an unset GBA buffer so that the global batch matches `inherited`.
    pub fn resolve_against(self, inherited: &ModeConfig) -> Result<ModeConfig> {
        match self {
            ModeConfig::Gba {
                buffer,
                local_batch,
                iota,
            } => {
                let target = global_batch(inherited)?.0;
                let m = compute_m(target, 1, local_batch as u64)?;
                if let Some(given) = buffer {
                    if given as u64 != m {
                        return Err(Error::Config(format!(
                            "buffer {given} gives global batch {} but the inherited mode has {target} \
                             (M = {target} / {local_batch} = {m})",
                            given * local_batch
                        )));
                    }
                }
                Ok(ModeConfig::Gba {
                    buffer: Some(m as usize),
                    local_batch,
                    iota,
                })
            }
            other => Ok(other),
        }
    }
}

/// `M = B_s · N_s / B_a`, required to be an exact integer.
pub fn compute_m(sync_local_batch: u64, sync_workers: u64, gba_local_batch: u64) -> Result<u64> {
    if gba_local_batch == 0 {
        return Err(Error::Argument("GBA local batch must be positive".into()));
    }
    let g = sync_local_batch * sync_workers;
    if !g.is_multiple_of(gba_local_batch) {
        let floor = g / gba_local_batch;
        return Err(Error::Switch {
            numerator: g,
            divisor: gba_local_batch,
            floor,
            ceil: floor + 1,
        });
    }
    Ok(g / gba_local_batch)
}

pub fn global_batch(mode: &ModeConfig) -> Result<GlobalBatch> {
    let b = mode.local_batch() as u64;
    Ok(GlobalBatch(match *mode {
        ModeConfig::Sync { workers, .. } | ModeConfig::HopBs { workers, .. } => workers as u64 * b,
        ModeConfig::Async { .. } => b,
        ModeConfig::Bsp { b2, .. } => b2 as u64 * b,
        ModeConfig::HopBw { workers, b3, .. } => (workers - b3) as u64 * b,
        ModeConfig::Gba { .. } => mode.gba_buffer()? as u64 * b,
    }))
}

/// The GBA configuration that keeps a synchronous run's global batch.
pub fn gba_from_sync(sync: &ModeConfig, gba_local_batch: usize, iota: Option<u64>) -> Result<ModeConfig> {
    match *sync {
        ModeConfig::Sync {
            workers,
            local_batch,
        } => {
            let m = compute_m(local_batch as u64, workers as u64, gba_local_batch as u64)?;
            Ok(ModeConfig::Gba {
                buffer: Some(m as usize),
                local_batch: gba_local_batch,
                iota,
            })
        }
        other => Err(Error::Argument(format!("expected a sync mode, got {}", other.name()))),
    }
}

/// When a worker is allowed to pull.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PullGate {
    Free,
    /// At most one pull per global step; the next pull waits for the update.
    OncePerStep,
    /// A worker may start an iteration only while its iteration count exceeds
    /// the slowest worker's completed count by at most the bound.
    BoundedClock(u64),
}

/// What happens to a gradient when it reaches the server.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArrivalRule {
    Buffer,
    /// Discard gradients computed before the current step.
    DropStale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSource {
    /// Token list with each value repeated `trigger` times.
    Schedule,
    /// Token equals the global step at pull time.
    GlobalStep,
}

/// Compiled mode policy consumed by the server state machine and the
/// cluster simulators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPolicy {
    pub mode: ModeConfig,
    pub workers: usize,
    pub local_batch: usize,
    /// Gradients per aggregation; also the dense divisor.
    pub trigger: usize,
    pub decay: Decay,
    pub arrival: ArrivalRule,
    pub gate: PullGate,
    pub tokens: TokenSource,
    /// On each update, workers still computing against an older step are cut
    /// short and their gradients are pushed (and discarded) immediately.
    pub preempt_stale: bool,
}

pub fn step_semantics(mode: &ModeConfig) -> Result<StepPolicy> {
    mode.validate()?;
    let workers = mode.workers()?;
    let base = StepPolicy {
        mode: *mode,
        workers,
        local_batch: mode.local_batch(),
        trigger: workers,
        decay: Decay::Threshold { iota: None },
        arrival: ArrivalRule::Buffer,
        gate: PullGate::Free,
        tokens: TokenSource::GlobalStep,
        preempt_stale: false,
    };
    Ok(match *mode {
        ModeConfig::Sync { .. } => StepPolicy {
            gate: PullGate::OncePerStep,
            ..base
        },
        ModeConfig::Async { .. } => StepPolicy { trigger: 1, ..base },
        ModeConfig::Bsp { b2, .. } => StepPolicy { trigger: b2, ..base },
        ModeConfig::HopBs { b1, .. } => StepPolicy {
            gate: PullGate::BoundedClock(b1),
            ..base
        },
        ModeConfig::HopBw { b3, .. } => StepPolicy {
            trigger: workers - b3,
            arrival: ArrivalRule::DropStale,
            gate: PullGate::OncePerStep,
            preempt_stale: true,
            ..base
        },
        ModeConfig::Gba { iota, .. } => StepPolicy {
            decay: Decay::Threshold { iota },
            tokens: TokenSource::Schedule,
            ..base
        },
    })
}
