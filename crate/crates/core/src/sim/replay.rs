use std::collections::VecDeque;

use super::trace::Record;
use crate::error::{Error, Result};
use crate::model::{ModelParams, SparseGradient};
use crate::ps::{AggregationReport, BatchRef, PsState, PushOutcome};
use crate::workload::Workload;

/// Feeds a trace's pull/push/failure order back through a server state
/// started where the trace started, recomputing every gradient. Returns the
/// resulting aggregation reports and final parameters.
pub fn replay(
    workload: &dyn Workload,
    mut ps: PsState,
    records: &[Record],
) -> Result<(Vec<AggregationReport>, ModelParams)> {
    let mut outstanding: Vec<VecDeque<SparseGradient>> = vec![VecDeque::new(); ps.policy.workers];
    let mut reports = Vec::new();
    for r in records {
        match *r {
            Record::Pull {
                worker,
                token,
                pull_step,
                epoch,
                batch,
                ..
            } => {
                let b = BatchRef { epoch, index: batch };
                let pulled = ps.pull(worker, &workload.batch_ids(b)?)?;
                if pulled.token.0 != token || pulled.pull_step != pull_step {
                    return Err(Error::Invariant(format!(
                        "replayed pull of worker {worker} got token {} at step {}, trace has {token} at {pull_step}",
                        pulled.token.0, pulled.pull_step
                    )));
                }
                let g = workload.gradient(&pulled.snapshot, b)?;
                outstanding[worker].push_back(SparseGradient::new(g, pulled.token, worker, pulled.pull_step));
            }
            Record::Fail {
                worker,
                abandoned: true,
                ..
            } => {
                outstanding[worker].pop_back();
                ps.abandon(worker);
            }
            Record::Push {
                worker,
                token,
                pull_step,
                ..
            } => {
                let g = outstanding[worker].pop_front().ok_or_else(|| {
                    Error::Invariant(format!("push from worker {worker} without a pull"))
                })?;
                if g.token.0 != token || g.pull_step != pull_step {
                    return Err(Error::Invariant(format!(
                        "worker {worker} pushed token {token}, replay expected {}",
                        g.token.0
                    )));
                }
                match ps.push(g) {
                    Ok(PushOutcome::Aggregated(rep)) => reports.push(rep),
                    Ok(_) | Err(Error::NumericFault(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            _ => {}
        }
    }
    Ok((reports, ps.params))
}
