use serde::{Deserialize, Serialize};

use super::trace::{Record, Trace};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpsMetrics {
    /// Samples in surviving aggregate entries per simulated second, measured
    /// up to the last applied step.
    pub global_qps: f64,
    /// Gradients received from each worker, in samples per second.
    pub local_qps: Vec<f64>,
    pub mean_staleness: f64,
    pub max_staleness: u64,
    /// Discarded on arrival plus zero-weighted at aggregation.
    pub dropped: u64,
    pub steps: u64,
}

pub fn qps_metrics(trace: &Trace) -> Result<QpsMetrics> {
    qps_from_records(
        &trace.records,
        trace.workers,
        trace.local_batch,
        trace.summary.start_time,
        trace.summary.end_time,
    )
}

/// Metrics from raw records; `start`/`end` bound the observed window.
pub fn qps_from_records(
    records: &[Record],
    workers: usize,
    local_batch: usize,
    start: f64,
    end: f64,
) -> Result<QpsMetrics> {
    let mut kept = 0u64;
    let mut dropped = 0u64;
    let mut steps = 0u64;
    let mut last_apply = start;
    let mut staleness_sum = 0u64;
    let mut entries = 0u64;
    let mut max_staleness = 0;
    let mut pushes = vec![0u64; workers];
    for r in records {
        match *r {
            Record::Push { worker, .. } => {
                *pushes.get_mut(worker).ok_or_else(|| {
                    Error::Argument(format!("record names worker {worker} of {workers}"))
                })? += 1;
            }
            Record::Drop { .. } => dropped += 1,
            Record::Entry {
                kept: k, staleness, ..
            } => {
                if k {
                    kept += 1;
                } else {
                    dropped += 1;
                }
                entries += 1;
                staleness_sum += staleness;
                max_staleness = max_staleness.max(staleness);
            }
            Record::Apply { t, .. } => {
                steps += 1;
                last_apply = t;
            }
            _ => {}
        }
    }
    if steps == 0 {
        return Err(Error::UndefinedMetric("trace has no applied steps".into()));
    }
    let b = local_batch as f64;
    let elapsed = last_apply - start;
    let span = end - start;
    let rate = |n: u64, d: f64| if d > 0.0 { n as f64 * b / d } else { 0.0 };
    Ok(QpsMetrics {
        global_qps: rate(kept, elapsed),
        local_qps: pushes.iter().map(|&n| rate(n, span)).collect(),
        mean_staleness: staleness_sum as f64 / entries.max(1) as f64,
        max_staleness,
        dropped,
        steps,
    })
}

/// Largest spread in iterations started between the most and least
/// advanced worker, sampled after all records sharing a timestamp.
pub fn hop_bs_max_gap(records: &[Record], workers: usize) -> u64 {
    let mut started = vec![0u64; workers];
    let mut gap = 0;
    for (i, r) in records.iter().enumerate() {
        match *r {
            Record::Pull { worker, .. } => started[worker] += 1,
            Record::Fail {
                worker,
                abandoned: true,
                ..
            } => started[worker] -= 1,
            _ => {}
        }
        if records.get(i + 1).is_none_or(|next| next.time() != r.time()) {
            let hi = *started.iter().max().expect("workers > 0");
            let lo = *started.iter().min().expect("workers > 0");
            gap = gap.max(hi - lo);
        }
    }
    gap
}
