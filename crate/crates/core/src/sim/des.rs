//! Single-threaded discrete-event simulation of the worker loop
//! (pull, compute, non-blocking push) against one [`PsState`].

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use super::profile::WorkerProfile;
use super::trace::{EvalPoint, Record, Summary, Trace};
use crate::error::{Error, Result};
use crate::model::{DenseVector, SparseGradient};
use crate::modes::StepPolicy;
use crate::ps::{AggregationReport, BatchRef, Counters, PsState, PushOutcome};
use crate::workload::Workload;

/// Interval at which a downloader with a full buffer re-checks it.
pub const DOWNLOAD_POLL: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Download {
    /// Seconds to fetch one batch.
    pub seconds: f64,
    /// Batches a worker may hold ahead of compute.
    pub capacity: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub pull_latency: f64,
    #[serde(default)]
    pub push_latency: f64,
    /// Without a download stage a worker takes its batch at pull time.
    #[serde(default)]
    pub download: Option<Download>,
    /// Evaluate every this many applied steps (and once at the start).
    #[serde(default)]
    pub eval_every: Option<u64>,
    #[serde(default)]
    pub record_params: bool,
    #[serde(default)]
    pub log_norms: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let lat_ok = |x: f64| x >= 0.0 && x.is_finite();
        if !lat_ok(self.pull_latency) || !lat_ok(self.push_latency) {
            return Err(Error::Config("latencies must be finite and >= 0".into()));
        }
        if let Some(d) = self.download {
            if d.capacity == 0 || !lat_ok(d.seconds) {
                return Err(Error::Config(format!("invalid download stage {d:?}")));
            }
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum EventKind {
    Fail,
    Recover,
    ComputeDone { gen: u64 },
    PushArrive { gradient: SparseGradient },
    DownloadDone { gen: u64, batch: BatchRef },
    DownloadResume { gen: u64 },
    PullServe { gen: u64 },
}

impl EventKind {
    /// Pull requests sort after everything else at the same instant, so a
    /// pull sees every update that lands at that time.
    fn class(&self) -> u8 {
        match self {
            EventKind::PullServe { .. } => 1,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Event {
    time: f64,
    class: u8,
    seq: u64,
    worker: usize,
    kind: EventKind,
}

impl Event {
    fn key(&self) -> (f64, u8, u64) {
        (self.time, self.class, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.key(), other.key());
        b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Phase {
    Requesting,
    Parked,
    Starved,
    Computing { gradient: SparseGradient },
    Failed,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct WorkerState {
    phase: Phase,
    gen: u64,
    iterations: u64,
    buffer: VecDeque<BatchRef>,
    downloading: bool,
    full_since: Option<f64>,
    source_dry: bool,
    /// The buffered batch is promised to the worker that was starving for
    /// it and no longer occupies a slot.
    claimed: bool,
}

/// Complete simulator state; restoring it continues a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub ps: PsState,
    pub now: f64,
    seq: u64,
    events: EventQueue,
    workers: Vec<WorkerState>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
struct EventQueue(BinaryHeap<Event>);

impl PartialEq for EventQueue {
    fn eq(&self, other: &Self) -> bool {
        let a = self.0.clone().into_sorted_vec();
        let b = other.0.clone().into_sorted_vec();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.time.to_bits() == y.time.to_bits()
                    && (x.class, x.seq, x.worker) == (y.class, y.seq, y.worker)
                    && x.kind == y.kind
            })
    }
}

impl SimState {
    pub fn policy(&self) -> &StepPolicy {
        &self.ps.policy
    }

    pub fn pending_events(&self) -> usize {
        self.events.0.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    StepBudget,
    DataExhausted,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::StepBudget => "step-budget",
            StopReason::DataExhausted => "data-exhausted",
        }
    }
}

pub struct Simulator<'a> {
    workload: &'a dyn Workload,
    profiles: Vec<WorkerProfile>,
    config: SimConfig,
    seed: u64,
    state: SimState,
    records: Vec<Record>,
    reports: Vec<AggregationReport>,
    evals: Vec<EvalPoint>,
    history: Vec<DenseVector>,
    start_time: f64,
    start_step: u64,
    start_counters: Counters,
    last_apply: f64,
    arrivals: Vec<u64>,
    stop: Option<StopReason>,
}

impl<'a> Simulator<'a> {
    /// Fresh run from `ps` at simulated time 0: every worker requests its
    /// first pull, failure windows are scheduled.
    pub fn new(
        workload: &'a dyn Workload,
        ps: PsState,
        profiles: Vec<WorkerProfile>,
        config: SimConfig,
        seed: u64,
    ) -> Result<Self> {
        let n = ps.policy.workers;
        let mut state = SimState {
            ps,
            now: 0.0,
            seq: 0,
            events: EventQueue::default(),
            workers: vec![
                WorkerState {
                    phase: Phase::Requesting,
                    gen: 0,
                    iterations: 0,
                    buffer: VecDeque::new(),
                    downloading: false,
                    full_since: None,
                    source_dry: false,
                    claimed: false,
                };
                n
            ],
        };
        Self::check_setup(workload, &state, &profiles, &config)?;
        for (w, p) in profiles.iter().enumerate() {
            for f in &p.failures {
                push_event(&mut state, f.fail_at, w, EventKind::Fail);
                if let Some(r) = f.recover_at {
                    push_event(&mut state, r, w, EventKind::Recover);
                }
            }
        }
        for w in 0..n {
            push_event(&mut state, 0.0, w, EventKind::PullServe { gen: 0 });
        }
        let mut sim = Self::resume(workload, state, profiles, config, seed)?;
        if sim.config.download.is_some() {
            for w in 0..n {
                sim.start_download(w);
            }
        }
        Ok(sim)
    }

    /// Continues from a saved state.
    pub fn resume(
        workload: &'a dyn Workload,
        state: SimState,
        profiles: Vec<WorkerProfile>,
        config: SimConfig,
        seed: u64,
    ) -> Result<Self> {
        Self::check_setup(workload, &state, &profiles, &config)?;
        let n = profiles.len();
        let mut sim = Self {
            workload,
            profiles,
            config,
            seed,
            start_time: state.now,
            start_step: state.ps.global_step(),
            start_counters: state.ps.counters,
            last_apply: state.now,
            arrivals: vec![0; n],
            records: Vec::new(),
            reports: Vec::new(),
            evals: Vec::new(),
            history: Vec::new(),
            state,
            stop: None,
        };
        if sim.config.record_params {
            sim.record_params();
        }
        if sim.config.eval_every.is_some() {
            sim.evaluate()?;
        }
        Ok(sim)
    }

    fn check_setup(
        workload: &dyn Workload,
        state: &SimState,
        profiles: &[WorkerProfile],
        config: &SimConfig,
    ) -> Result<()> {
        config.validate()?;
        let policy = &state.ps.policy;
        if profiles.len() != policy.workers {
            return Err(Error::Config(format!(
                "{} requires {} workers, got {} profiles",
                policy.mode.name(),
                policy.workers,
                profiles.len()
            )));
        }
        for p in profiles {
            p.validate()?;
        }
        if workload.local_batch() != policy.local_batch {
            return Err(Error::Config(format!(
                "workload batch {} differs from mode local batch {}",
                workload.local_batch(),
                policy.local_batch
            )));
        }
        Ok(())
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn global_step(&self) -> u64 {
        self.state.ps.global_step()
    }

    /// Processes events until the global step reaches `target` (absolute),
    /// or the data runs out.
    pub fn run_until(&mut self, target: Option<u64>) -> Result<StopReason> {
        loop {
            if target.is_some_and(|t| self.global_step() >= t) {
                self.stop = Some(StopReason::StepBudget);
                return Ok(StopReason::StepBudget);
            }
            let Some(ev) = self.state.events.0.pop() else {
                if !self.state.ps.data_list.exhausted() {
                    return Err(Error::Deadlock {
                        blocked: self.dump_workers(),
                    });
                }
                self.stop = Some(StopReason::DataExhausted);
                return Ok(StopReason::DataExhausted);
            };
            self.state.now = ev.time;
            self.handle(ev)?;
        }
    }

    fn dump_workers(&self) -> Vec<String> {
        self.state
            .workers
            .iter()
            .zip(&self.state.ps.books)
            .enumerate()
            .map(|(w, (s, b))| {
                let phase = match &s.phase {
                    Phase::Requesting => "requesting",
                    Phase::Parked => "parked",
                    Phase::Starved => "starved",
                    Phase::Computing { .. } => "computing",
                    Phase::Failed => "failed",
                    Phase::Done => "done",
                };
                format!(
                    "worker {w}: {phase} (started {}, pushed {}, last pull step {:?}, step {}, buffered {}/{})",
                    b.pulls,
                    b.pushes,
                    b.last_pull_step,
                    self.state.ps.global_step(),
                    self.state.ps.buffer.len(),
                    self.state.ps.buffer.capacity()
                )
            })
            .collect()
    }

    fn handle(&mut self, ev: Event) -> Result<()> {
        let w = ev.worker;
        let now = ev.time;
        let gen = self.state.workers[w].gen;
        match ev.kind {
            EventKind::Fail => {
                let ws = &mut self.state.workers[w];
                let abandoned = matches!(ws.phase, Phase::Computing { .. });
                ws.phase = Phase::Failed;
                ws.gen += 1;
                ws.buffer.clear();
                ws.downloading = false;
                ws.full_since = None;
                ws.claimed = false;
                if abandoned {
                    self.state.ps.abandon(w);
                }
                self.records.push(Record::Fail {
                    t: now,
                    worker: w,
                    abandoned,
                });
            }
            EventKind::Recover => {
                let ws = &mut self.state.workers[w];
                ws.phase = Phase::Requesting;
                let g = ws.gen;
                push_event(&mut self.state, now, w, EventKind::PullServe { gen: g });
                self.records.push(Record::Recover { t: now, worker: w });
                self.start_download(w);
            }
            EventKind::PullServe { gen: g } if g == gen => self.serve_pull(w, now)?,
            EventKind::ComputeDone { gen: g } if g == gen => {
                let ws = &mut self.state.workers[w];
                let Phase::Computing { gradient } = std::mem::replace(&mut ws.phase, Phase::Requesting)
                else {
                    return Err(Error::Invariant(format!("worker {w} finished without computing")));
                };
                let arrive = now + self.config.push_latency;
                push_event(&mut self.state, arrive, w, EventKind::PushArrive { gradient });
                push_event(&mut self.state, now, w, EventKind::PullServe { gen });
            }
            EventKind::PushArrive { gradient } => self.arrive(gradient, now)?,
            EventKind::DownloadDone { gen: g, batch } if g == gen => {
                let ws = &mut self.state.workers[w];
                ws.downloading = false;
                ws.buffer.push_back(batch);
                if ws.phase == Phase::Starved {
                    ws.claimed = true;
                    ws.phase = Phase::Requesting;
                    push_event(&mut self.state, now, w, EventKind::PullServe { gen });
                }
                self.start_download(w);
            }
            EventKind::DownloadResume { gen: g } if g == gen => self.start_download(w),
            // Superseded by a failure or a preemption.
            _ => {}
        }
        Ok(())
    }

    fn start_download(&mut self, w: usize) {
        let Some(d) = self.config.download else {
            return;
        };
        let now = self.state.now;
        let ws = &mut self.state.workers[w];
        if ws.downloading || ws.source_dry || ws.phase == Phase::Failed || ws.full_since.is_some() {
            return;
        }
        if ws.buffer.len() - usize::from(ws.claimed) >= d.capacity {
            ws.full_since = Some(now);
            return;
        }
        match self.state.ps.take_batch() {
            Ok(batch) => {
                ws.downloading = true;
                let gen = ws.gen;
                push_event(&mut self.state, now + d.seconds, w, EventKind::DownloadDone { gen, batch });
            }
            Err(_) => {
                ws.source_dry = true;
                if ws.phase == Phase::Starved {
                    ws.phase = Phase::Done;
                }
            }
        }
    }

    fn next_batch(&mut self, w: usize, now: f64) -> Option<BatchRef> {
        if self.config.download.is_none() {
            return self.state.ps.take_batch().ok();
        }
        let ws = &mut self.state.workers[w];
        let batch = ws.buffer.pop_front()?;
        ws.claimed = false;
        if let Some(since) = ws.full_since.take() {
            let ticks = ((now - since) / DOWNLOAD_POLL).ceil().max(1.0);
            let gen = ws.gen;
            push_event(
                &mut self.state,
                since + ticks * DOWNLOAD_POLL,
                w,
                EventKind::DownloadResume { gen },
            );
        }
        Some(batch)
    }

    fn serve_pull(&mut self, w: usize, now: f64) -> Result<()> {
        if !self.state.ps.may_pull(w) {
            self.state.workers[w].phase = Phase::Parked;
            return Ok(());
        }
        let Some(batch) = self.next_batch(w, now) else {
            let ws = &mut self.state.workers[w];
            ws.phase = if self.config.download.is_some() && !ws.source_dry {
                Phase::Starved
            } else {
                Phase::Done
            };
            return Ok(());
        };
        let ids = self.workload.batch_ids(batch)?;
        let pulled = self.state.ps.pull(w, &ids)?;
        self.records.push(Record::Pull {
            t: now,
            worker: w,
            token: pulled.token.0,
            pull_step: pulled.pull_step,
            epoch: batch.epoch,
            batch: batch.index,
        });
        let grad = self.workload.gradient(&pulled.snapshot, batch)?;
        let ws = &mut self.state.workers[w];
        let start = now + self.config.pull_latency;
        let dt = self.profiles[w].compute_time(self.seed, w, ws.iterations, start);
        ws.iterations += 1;
        ws.phase = Phase::Computing {
            gradient: SparseGradient::new(grad, pulled.token, w, pulled.pull_step),
        };
        let gen = ws.gen;
        push_event(&mut self.state, start + dt, w, EventKind::ComputeDone { gen });
        Ok(())
    }

    fn arrive(&mut self, gradient: SparseGradient, now: f64) -> Result<()> {
        let (w, token, pull_step) = (gradient.worker_id, gradient.token.0, gradient.pull_step);
        let k = self.global_step();
        self.arrivals[w] += 1;
        self.records.push(Record::Push {
            t: now,
            worker: w,
            token,
            pull_step,
        });
        match self.state.ps.push(gradient) {
            Ok(PushOutcome::Buffered) => {}
            Ok(PushOutcome::DroppedOnArrival) => self.records.push(Record::Drop {
                t: now,
                worker: w,
                token,
                pull_step,
                apply_step: k,
                staleness: k - pull_step,
            }),
            Ok(PushOutcome::Aggregated(report)) => self.applied(report, now)?,
            // Counted as rejected by the server; the run goes on.
            Err(Error::NumericFault(_)) => {}
            Err(e) => return Err(e),
        }
        self.wake_parked(now);
        Ok(())
    }

    fn applied(&mut self, report: AggregationReport, now: f64) -> Result<()> {
        let k = report.step;
        for e in &report.entries {
            self.records.push(Record::Entry {
                t: now,
                worker: e.worker,
                token: e.token.0,
                pull_step: e.pull_step,
                apply_step: k,
                staleness: e.staleness,
                kept: e.kept,
                ids_touched: e.ids_touched,
                ids_stale: e.ids_stale,
            });
        }
        self.records.push(Record::Apply {
            t: now,
            apply_step: k,
            surviving: report.surviving,
            dropped: report.dropped,
            norm: self.config.log_norms.then_some(report.norm),
        });
        self.reports.push(report);
        self.last_apply = now;
        if self.config.record_params {
            self.record_params();
        }
        if let Some(every) = self.config.eval_every {
            if self.global_step().is_multiple_of(every) {
                self.evaluate()?;
            }
        }
        if self.state.ps.policy.preempt_stale {
            let k = self.global_step();
            for w in 0..self.state.workers.len() {
                let ws = &mut self.state.workers[w];
                if let Phase::Computing { gradient } = &ws.phase {
                    if gradient.pull_step < k {
                        ws.gen += 1;
                        let gen = ws.gen;
                        push_event(&mut self.state, now, w, EventKind::ComputeDone { gen });
                    }
                }
            }
        }
        Ok(())
    }

    fn wake_parked(&mut self, now: f64) {
        for w in 0..self.state.workers.len() {
            if self.state.workers[w].phase == Phase::Parked && self.state.ps.may_pull(w) {
                self.state.workers[w].phase = Phase::Requesting;
                let gen = self.state.workers[w].gen;
                push_event(&mut self.state, now, w, EventKind::PullServe { gen });
            }
        }
    }

    fn record_params(&mut self) {
        let dense = self.state.ps.params.dense.clone();
        self.records.push(Record::Params {
            t: self.state.now,
            step: self.global_step(),
            dense: dense.clone(),
        });
        self.history.push(dense);
    }

    fn evaluate(&mut self) -> Result<()> {
        let e = self.workload.evaluate(&self.state.ps.params)?;
        let p = EvalPoint {
            step: self.global_step(),
            t: self.state.now,
            loss: e.loss,
            auc: e.auc,
        };
        self.records.push(Record::Eval {
            t: p.t,
            step: p.step,
            loss: p.loss,
            auc: p.auc,
        });
        self.evals.push(p);
        Ok(())
    }

    /// Trace of everything processed since construction or resume, plus the
    /// state to continue from.
    pub fn finish(self) -> (Trace, SimState) {
        let policy = self.state.ps.policy;
        let b = policy.local_batch as f64;
        let c = self.state.ps.counters;
        let applied = (c.applied - self.start_counters.applied) as f64 * b;
        let elapsed = self.last_apply - self.start_time;
        let span = self.state.now - self.start_time;
        let summary = Summary {
            mode: policy.mode.name().to_string(),
            start_time: self.start_time,
            end_time: self.state.now,
            first_step: self.start_step,
            last_step: self.state.ps.global_step(),
            local_batch: policy.local_batch,
            global_qps: if elapsed > 0.0 { applied / elapsed } else { 0.0 },
            local_qps: self
                .arrivals
                .iter()
                .map(|&n| if span > 0.0 { n as f64 * b / span } else { 0.0 })
                .collect(),
            counters: c,
            stop: self.stop.map_or("running", |s| s.as_str()).to_string(),
        };
        let trace = Trace {
            mode: policy.mode.name().to_string(),
            workers: policy.workers,
            local_batch: policy.local_batch,
            records: self.records,
            reports: self.reports,
            evals: self.evals,
            param_history: self.history,
            final_params: self.state.ps.params.clone(),
            summary,
            norms_logged: self.config.log_norms,
        };
        (trace, self.state)
    }
}

fn push_event(state: &mut SimState, time: f64, worker: usize, kind: EventKind) {
    state.seq += 1;
    state.events.0.push(Event {
        time,
        class: kind.class(),
        seq: state.seq,
        worker,
        kind,
    });
}

/// Runs a fresh simulation to `steps` applied updates (or data exhaustion).
pub fn run(
    workload: &dyn Workload,
    ps: PsState,
    profiles: Vec<WorkerProfile>,
    config: SimConfig,
    seed: u64,
    steps: Option<u64>,
) -> Result<Trace> {
    let target = steps.map(|s| ps.global_step() + s);
    let mut sim = Simulator::new(workload, ps, profiles, config, seed)?;
    sim.run_until(target)?;
    Ok(sim.finish().0)
}
