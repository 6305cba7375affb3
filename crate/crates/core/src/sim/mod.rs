//! Cluster simulation: a deterministic discrete-event scheduler and a live
//! multi-threaded runner, both driving the same server state machine.

mod des;
mod live;
mod metrics;
mod profile;
mod replay;
mod trace;

pub use des::{run, Download, SimConfig, SimState, Simulator, StopReason, DOWNLOAD_POLL};
pub use live::{live_run, LiveConfig};
pub use metrics::{hop_bs_max_gap, qps_metrics, QpsMetrics};
pub use profile::{ComputeTime, FailureWindow, Slowdown, WorkerProfile};
pub use replay::replay;
pub use trace::{read_jsonl, reports_from_records, EvalPoint, Record, Summary, Trace};

use crate::error::Result;
use crate::modes::{step_semantics, ModeConfig};
use crate::ps::{DataList, PsState};
use crate::workload::Workload;

/// Server state for a fresh run of `mode` on `workload`; `epochs = None`
/// cycles the data forever.
pub fn initial_state(workload: &dyn Workload, mode: &ModeConfig, eta: f64, epochs: Option<u64>) -> Result<PsState> {
    PsState::new(
        workload.init_params(),
        step_semantics(mode)?,
        eta,
        DataList::new(workload.batches_per_epoch(), 0, epochs),
    )
}
