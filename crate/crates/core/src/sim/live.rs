//! Live runner: one thread per worker plus one server thread, talking over
//! channels. Interleavings are whatever the OS scheduler produces.

use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::profile::WorkerProfile;
use super::trace::{EvalPoint, Record, Summary, Trace};
use crate::error::{Error, Result};
use crate::model::SparseGradient;
use crate::ps::{BatchRef, Pulled, PsState, PushOutcome};
use crate::workload::Workload;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LiveConfig {
    pub steps: u64,
    pub wall_budget: Duration,
    /// Real seconds slept per simulated second of profile compute time;
    /// 0 disables sleeping.
    pub time_scale: f64,
}

enum ToServer {
    Pull(usize),
    Push(Box<SparseGradient>),
    Failed(usize, Error),
}

enum ToWorker {
    Work(BatchRef, Box<Pulled>),
    Stop,
}

pub fn live_run(
    workload: &dyn Workload,
    mut ps: PsState,
    profiles: &[WorkerProfile],
    config: &LiveConfig,
    seed: u64,
) -> Result<Trace> {
    let n = ps.policy.workers;
    if profiles.len() != n {
        return Err(Error::Config(format!("{n} workers need {n} profiles, got {}", profiles.len())));
    }
    let target = ps.global_step() + config.steps;
    let start_step = ps.global_step();
    let start_counters = ps.counters;
    let clock = Instant::now();
    let (to_server, inbox) = mpsc::channel::<ToServer>();
    let mut outboxes = Vec::with_capacity(n);
    let mut inboxes = Vec::with_capacity(n);
    for _ in 0..n {
        let (tx, rx) = mpsc::channel::<ToWorker>();
        outboxes.push(tx);
        inboxes.push(rx);
    }

    let mut records = Vec::new();
    let mut reports = Vec::new();
    let mut evals = Vec::new();
    let mut arrivals = vec![0u64; n];
    let mut last_apply = 0.0;
    let e0 = workload.evaluate(&ps.params)?;
    evals.push(EvalPoint {
        step: start_step,
        t: 0.0,
        loss: e0.loss,
        auc: e0.auc,
    });

    let outcome: Result<&'static str> = thread::scope(|scope| {
        for (w, rx) in inboxes.into_iter().enumerate() {
            let tx = to_server.clone();
            let profile = &profiles[w];
            scope.spawn(move || {
                let mut iteration = 0u64;
                loop {
                    if tx.send(ToServer::Pull(w)).is_err() {
                        return;
                    }
                    let Ok(ToWorker::Work(batch, pulled)) = rx.recv() else {
                        return;
                    };
                    let grad = match workload.gradient(&pulled.snapshot, batch) {
                        Ok(g) => g,
                        Err(e) => {
                            let _ = tx.send(ToServer::Failed(w, e));
                            return;
                        }
                    };
                    if config.time_scale > 0.0 {
                        let dt = profile.compute_time(seed, w, iteration, 0.0) * config.time_scale;
                        thread::sleep(Duration::from_secs_f64(dt));
                    }
                    iteration += 1;
                    let g = SparseGradient::new(grad, pulled.token, w, pulled.pull_step);
                    if tx.send(ToServer::Push(Box::new(g))).is_err() {
                        return;
                    }
                }
            });
        }
        drop(to_server);

        let mut parked = vec![false; n];
        let serve = |ps: &mut PsState, w: usize, records: &mut Vec<Record>| -> Result<bool> {
            let Ok(batch) = ps.take_batch() else {
                return Ok(false);
            };
            let pulled = ps.pull(w, &workload.batch_ids(batch)?)?;
            records.push(Record::Pull {
                t: clock.elapsed().as_secs_f64(),
                worker: w,
                token: pulled.token.0,
                pull_step: pulled.pull_step,
                epoch: batch.epoch,
                batch: batch.index,
            });
            Ok(outboxes[w].send(ToWorker::Work(batch, Box::new(pulled))).is_ok())
        };
        let result = loop {
            if ps.global_step() >= target {
                break Ok("step-budget");
            }
            let left = config.wall_budget.saturating_sub(clock.elapsed());
            let msg = match inbox.recv_timeout(left) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => break Ok("wall-budget"),
                Err(RecvTimeoutError::Disconnected) => break Ok("data-exhausted"),
            };
            match msg {
                ToServer::Pull(w) => {
                    if ps.may_pull(w) {
                        if !serve(&mut ps, w, &mut records)? {
                            let _ = outboxes[w].send(ToWorker::Stop);
                        }
                    } else {
                        parked[w] = true;
                    }
                }
                ToServer::Failed(w, e) => {
                    break Err(Error::Invariant(format!("worker {w} failed: {e}")));
                }
                ToServer::Push(g) => {
                    let t = clock.elapsed().as_secs_f64();
                    let (w, token, pull_step) = (g.worker_id, g.token.0, g.pull_step);
                    let k = ps.global_step();
                    arrivals[w] += 1;
                    records.push(Record::Push {
                        t,
                        worker: w,
                        token,
                        pull_step,
                    });
                    match ps.push(*g) {
                        Ok(PushOutcome::Buffered) | Err(Error::NumericFault(_)) => {}
                        Ok(PushOutcome::DroppedOnArrival) => records.push(Record::Drop {
                            t,
                            worker: w,
                            token,
                            pull_step,
                            apply_step: k,
                            staleness: k - pull_step,
                        }),
                        Ok(PushOutcome::Aggregated(rep)) => {
                            for e in &rep.entries {
                                records.push(Record::Entry {
                                    t,
                                    worker: e.worker,
                                    token: e.token.0,
                                    pull_step: e.pull_step,
                                    apply_step: rep.step,
                                    staleness: e.staleness,
                                    kept: e.kept,
                                    ids_touched: e.ids_touched,
                                    ids_stale: e.ids_stale,
                                });
                            }
                            records.push(Record::Apply {
                                t,
                                apply_step: rep.step,
                                surviving: rep.surviving,
                                dropped: rep.dropped,
                                norm: Some(rep.norm),
                            });
                            reports.push(rep);
                            last_apply = t;
                        }
                        Err(e) => break Err(e),
                    }
                    for v in 0..n {
                        if parked[v] && ps.may_pull(v) {
                            parked[v] = false;
                            if !serve(&mut ps, v, &mut records)? {
                                let _ = outboxes[v].send(ToWorker::Stop);
                            }
                        }
                    }
                }
            }
        };
        for tx in &outboxes {
            let _ = tx.send(ToWorker::Stop);
        }
        drop(inbox);
        result
    });
    let stop = outcome?;

    let end = clock.elapsed().as_secs_f64();
    let e = workload.evaluate(&ps.params)?;
    evals.push(EvalPoint {
        step: ps.global_step(),
        t: end,
        loss: e.loss,
        auc: e.auc,
    });
    let b = ps.policy.local_batch as f64;
    let applied = (ps.counters.applied - start_counters.applied) as f64 * b;
    let summary = Summary {
        mode: ps.policy.mode.name().to_string(),
        start_time: 0.0,
        end_time: end,
        first_step: start_step,
        last_step: ps.global_step(),
        local_batch: ps.policy.local_batch,
        global_qps: if last_apply > 0.0 { applied / last_apply } else { 0.0 },
        local_qps: arrivals.iter().map(|&a| a as f64 * b / end.max(f64::MIN_POSITIVE)).collect(),
        counters: ps.counters,
        stop: stop.to_string(),
    };
    Ok(Trace {
        mode: ps.policy.mode.name().to_string(),
        workers: n,
        local_batch: ps.policy.local_batch,
        records,
        reports,
        evals,
        param_history: Vec::new(),
        final_params: ps.params.clone(),
        summary,
        norms_logged: true,
    })
}
