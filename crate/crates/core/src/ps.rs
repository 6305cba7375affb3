//! Parameter-server state machine: token list, data list, gradient buffer,
//! per-ID step tags, and the aggregate-and-apply step.
//!
//! The state is plain data. The discrete-event simulator mutates it from its
//! event loop; the live runner owns it inside a single server thread. Either
//! way every operation here runs to completion before the next one starts,
//! so a pull never observes a half-applied aggregate.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, DenseVector, FeatureId, Gradient, ModelParams, SparseGradient};
use crate::modes::{ArrivalRule, PullGate, StepPolicy, TokenSource};

/// Intended apply step of the batch it travels with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u64);

/// Per-epoch token values: `t_i = ⌊i / M⌋` for `i < Q`, so each value
/// repeats `M` times (the last one possibly fewer) and there are `⌈Q/M⌉`
/// distinct values.
pub fn build_token_schedule(q: u64, m: u64) -> Vec<Token> {
    assert!(m > 0, "buffer size must be positive");
    (0..q).map(|i| Token(i / m)).collect()
}

/// Binary staleness weight: 0 when `k − τ > ι`, else 1. `iota = None` is an
/// unbounded tolerance.
pub fn staleness_filter(token: Token, step: u64, iota: Option<u64>) -> Result<u8> {
    if token.0 > step {
        return Err(Error::Protocol(format!(
            "token {} is ahead of global step {step}",
            token.0
        )));
    }
    Ok(match iota {
        Some(iota) if step - token.0 > iota => 0,
        _ => 1,
    })
}

/// Staleness decay applied to buffered gradients at aggregation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decay {
    /// Keep a gradient iff its gap is at most `iota`.
    Threshold { iota: Option<u64> },
}

impl Decay {
    /// Weight for a gradient that is `gap` steps behind.
    pub fn weight(&self, gap: u64) -> f64 {
        match *self {
            Decay::Threshold { iota: Some(iota) } if gap > iota => 0.0,
            Decay::Threshold { .. } => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenList {
    queue: VecDeque<Token>,
    next_index: u64,
    repeat: u64,
    low_water: usize,
    #[serde(default)]
    base: u64,
}

impl TokenList {
    pub fn new(repeat: usize, workers: usize) -> Self {
        Self::starting_at(repeat, workers, 0)
    }

    /// Schedule whose first token is `base`, for runs continuing from an
    /// already-trained global step.
    pub fn starting_at(repeat: usize, workers: usize, base: u64) -> Self {
        let mut list = Self {
            base,
            queue: VecDeque::new(),
            next_index: 0,
            repeat: repeat.max(1) as u64,
            low_water: workers.max(1),
        };
        list.refill();
        list
    }

    fn refill(&mut self) {
        while self.queue.len() < self.low_water {
            self.queue.push_back(Token(self.base + self.next_index / self.repeat));
            self.next_index += 1;
        }
    }

    /// Pops the front token and tops the queue back up to the worker count.
    pub fn dequeue(&mut self) -> Token {
        self.refill();
        let t = self.queue.pop_front().expect("refilled queue is non-empty");
        self.refill();
        t
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Index of the next token to be generated.
    pub fn cursor(&self) -> u64 {
        self.next_index
    }
}

/// Address of one batch: epoch plus index within the epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BatchRef {
    pub epoch: u64,
    pub index: usize,
}

/// FIFO of batch addresses, refilled epoch after epoch until `end_epoch`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataList {
    pub batches_per_epoch: usize,
    pub epoch: u64,
    pub next: usize,
    pub end_epoch: Option<u64>,
}

impl DataList {
    pub fn new(batches_per_epoch: usize, start_epoch: u64, end_epoch: Option<u64>) -> Self {
        Self {
            batches_per_epoch,
            epoch: start_epoch,
            next: 0,
            end_epoch,
        }
    }

    pub fn take(&mut self) -> Option<BatchRef> {
        if self.batches_per_epoch == 0 {
            return None;
        }
        if self.next == self.batches_per_epoch {
            self.epoch += 1;
            self.next = 0;
        }
        if self.end_epoch.is_some_and(|end| self.epoch >= end) {
            return None;
        }
        let r = BatchRef {
            epoch: self.epoch,
            index: self.next,
        };
        self.next += 1;
        Some(r)
    }

    pub fn exhausted(&self) -> bool {
        let epoch = if self.next == self.batches_per_epoch {
            self.epoch + 1
        } else {
            self.epoch
        };
        self.batches_per_epoch == 0 || self.end_epoch.is_some_and(|end| epoch >= end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBuffer {
    capacity: usize,
    entries: Vec<SparseGradient>,
}

impl GradientBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> &[SparseGradient] {
        &self.entries
    }
}

/// Last global step at which each ID was part of an applied aggregate.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdStepTags(BTreeMap<FeatureId, u64>);

impl IdStepTags {
    pub fn get(&self, id: FeatureId) -> Option<u64> {
        self.0.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Server-side view of one worker, used by the pull gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerBook {
    /// Iterations started (successful pulls not abandoned by a failure).
    pub pulls: u64,
    /// Gradients received.
    pub pushes: u64,
    pub last_pull_step: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Accepted arrivals.
    pub pushed: u64,
    /// Gradients that entered an aggregate with non-zero weight.
    pub applied: u64,
    /// Gradients excluded by the staleness rule, at arrival or aggregation.
    pub dropped: u64,
    /// Non-finite arrivals refused outright.
    pub rejected: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub worker: usize,
    pub token: Token,
    pub pull_step: u64,
    /// Data staleness `k − pull_step`.
    pub staleness: u64,
    pub kept: bool,
    /// Sparse rows carried by the entry.
    pub ids_touched: u32,
    /// Of those, rows updated after the worker pulled them.
    pub ids_stale: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    /// Global step the aggregate was applied at (`k`; the state moves to `k+1`).
    pub step: u64,
    pub surviving: usize,
    pub dropped: usize,
    pub entries: Vec<EntryReport>,
    /// L2 norm of the applied aggregate `v_k`.
    pub norm: f64,
}

impl AggregationReport {
    pub fn staleness(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.staleness).collect()
    }
}

/// Per-entry `k_apply − pull_step` of a completed aggregation.
pub fn measured_data_staleness(report: &AggregationReport) -> Vec<u64> {
    report.staleness()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pulled {
    pub snapshot: ModelParams,
    pub token: Token,
    pub pull_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PushOutcome {
    Buffered,
    DroppedOnArrival,
    Aggregated(AggregationReport),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsState {
    pub params: ModelParams,
    pub policy: StepPolicy,
    pub eta: f64,
    pub token_list: TokenList,
    pub data_list: DataList,
    pub buffer: GradientBuffer,
    pub id_tags: IdStepTags,
    pub books: Vec<WorkerBook>,
    pub counters: Counters,
}

impl PsState {
    pub fn new(params: ModelParams, policy: StepPolicy, eta: f64, data_list: DataList) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {eta}")));
        }
        if policy.trigger == 0 || policy.workers == 0 {
            return Err(Error::Config("policy needs positive trigger and worker count".into()));
        }
        Ok(Self {
            token_list: TokenList::starting_at(policy.trigger, policy.workers, params.global_step),
            params,
            buffer: GradientBuffer::new(policy.trigger),
            books: vec![WorkerBook::default(); policy.workers],
            policy,
            eta,
            data_list,
            id_tags: IdStepTags::default(),
            counters: Counters::default(),
        })
    }

    pub fn global_step(&self) -> u64 {
        self.params.global_step
    }

    pub fn take_batch(&mut self) -> Result<BatchRef> {
        self.data_list.take().ok_or(Error::EndOfStream)
    }

    /// Whether the mode's gate lets `worker` start a new iteration now.
    pub fn may_pull(&self, worker: usize) -> bool {
        let k = self.global_step();
        match self.policy.gate {
            PullGate::Free => true,
            PullGate::OncePerStep => self.books[worker].last_pull_step.is_none_or(|s| s < k),
            PullGate::BoundedClock(bound) => {
                let slowest = self.books.iter().map(|b| b.pushes).min().unwrap_or(0);
                self.books[worker].pulls <= slowest + bound
            }
        }
    }

    /// Snapshot of the dense parameters and the requested rows, plus a token.
    pub fn pull(&mut self, worker: usize, ids: &[FeatureId]) -> Result<Pulled> {
        if worker >= self.books.len() {
            return Err(Error::Argument(format!("unknown worker {worker}")));
        }
        if !self.may_pull(worker) {
            return Err(Error::Protocol(format!("worker {worker} pulled through a closed gate")));
        }
        let k = self.global_step();
        let token = match self.policy.tokens {
            TokenSource::Schedule => self.token_list.dequeue(),
            TokenSource::GlobalStep => Token(k),
        };
        let book = &mut self.books[worker];
        book.pulls += 1;
        book.last_pull_step = Some(k);
        Ok(Pulled {
            snapshot: self.params.snapshot(ids),
            token,
            pull_step: k,
        })
    }

    /// Forget the iteration a failed worker was computing. The token it held
    /// is gone for good.
    pub fn abandon(&mut self, worker: usize) {
        let book = &mut self.books[worker];
        book.pulls = book.pulls.saturating_sub(1);
        book.last_pull_step = None;
    }

    pub fn push(&mut self, gradient: SparseGradient) -> Result<PushOutcome> {
        let worker = gradient.worker_id;
        if worker >= self.books.len() {
            return Err(Error::Argument(format!("unknown worker {worker}")));
        }
        self.books[worker].pushes += 1;
        if !gradient.grad.is_finite() {
            self.counters.rejected += 1;
            return Err(Error::NumericFault(format!(
                "non-finite gradient from worker {worker} rejected"
            )));
        }
        self.counters.pushed += 1;
        if self.policy.arrival == ArrivalRule::DropStale && gradient.pull_step < self.global_step() {
            self.counters.dropped += 1;
            return Ok(PushOutcome::DroppedOnArrival);
        }
        self.buffer.entries.push(gradient);
        if self.buffer.is_full() {
            Ok(PushOutcome::Aggregated(self.aggregate_and_apply()?))
        } else {
            Ok(PushOutcome::Buffered)
        }
    }

    /// Aggregates a full buffer and applies it.
    ///
    /// Dense part: `Σ f_m g_m / M` with the divisor fixed at the buffer size.
    /// Sparse part: each row is weighted against the step at which its ID was
    /// last updated and averaged over the entries that kept it. Entries are
    /// summed in `(token, worker)` order.
    pub fn aggregate_and_apply(&mut self) -> Result<AggregationReport> {
        if self.buffer.len() != self.buffer.capacity {
            return Err(Error::Invariant(format!(
                "aggregation with {} of {} buffered gradients",
                self.buffer.len(),
                self.buffer.capacity
            )));
        }
        let k = self.global_step();
        let mut entries = std::mem::take(&mut self.buffer.entries);
        entries.sort_by_key(|g| (g.token, g.worker_id));

        let dim = self.params.dense.dim();
        let mut dense = vec![0.0; dim];
        let mut rows: BTreeMap<FeatureId, (Vec<f64>, u32)> = BTreeMap::new();
        let mut reports = Vec::with_capacity(entries.len());
        let mut surviving = 0;
        for g in &entries {
            if g.grad.dense.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: g.grad.dense.dim(),
                });
            }
            let weight = self.policy.decay.weight(k.saturating_sub(g.token.0));
            if weight > 0.0 {
                surviving += 1;
                for (acc, x) in dense.iter_mut().zip(g.grad.dense.as_slice()) {
                    *acc += weight * x;
                }
            }
            let mut ids_stale = 0;
            for (&id, row) in &g.grad.sparse {
                let tagged = self.id_tags.get(id).unwrap_or(0);
                if tagged > g.pull_step {
                    ids_stale += 1;
                }
                let w = self.policy.decay.weight(tagged.saturating_sub(g.token.0));
                if w > 0.0 {
                    let (acc, n) = rows
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; row.dim()], 0));
                    for (a, x) in acc.iter_mut().zip(row.as_slice()) {
                        *a += w * x;
                    }
                    *n += 1;
                }
            }
            reports.push(EntryReport {
                worker: g.worker_id,
                token: g.token,
                pull_step: g.pull_step,
                staleness: k - g.pull_step,
                kept: weight > 0.0,
                ids_touched: g.grad.sparse.len() as u32,
                ids_stale,
            });
        }
        let divisor = self.buffer.capacity as f64;
        for d in &mut dense {
            *d /= divisor;
        }
        let sparse = rows
            .into_iter()
            .map(|(id, (mut acc, n))| {
                let n = f64::from(n);
                for a in &mut acc {
                    *a /= n;
                }
                (id, DenseVector::from_raw(acc))
            })
            .collect::<BTreeMap<_, _>>();
        let v = Gradient {
            dense: DenseVector::from_raw(dense),
            sparse,
        };
        if let Err(e) = model::apply_update(&mut self.params, &v, self.eta) {
            self.buffer.entries = entries;
            return Err(e);
        }
        let new_step = self.global_step();
        for id in v.ids() {
            self.id_tags.0.insert(id, new_step);
        }
        let dropped = entries.len() - surviving;
        self.counters.applied += surviving as u64;
        self.counters.dropped += dropped as u64;
        Ok(AggregationReport {
            step: k,
            surviving,
            dropped,
            entries: reports,
            norm: v.norm_sq().sqrt(),
        })
    }

    /// `applied + dropped + buffered = pushed`.
    pub fn conservation_holds(&self) -> bool {
        let c = self.counters;
        c.applied + c.dropped + self.buffer.len() as u64 == c.pushed
    }
}
