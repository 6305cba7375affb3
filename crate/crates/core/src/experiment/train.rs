use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, ModelSection};
use crate::datagen::CtrDataset;
use crate::error::{Error, Result};
use crate::model::{DenseVector, LogisticEmbeddingModel, NoiseModel, QuadraticProblem};
use crate::modes::{step_semantics, ModeConfig};
use crate::ps::{DataList, PsState};
use crate::seed;
use crate::sim::{Record, SimConfig, Simulator, Trace, WorkerProfile};
use crate::workload::{CtrWorkload, Evaluation, QuadWorkload, Workload};

/// The task an experiment trains on, built once and cut into per-day
/// workloads.
#[derive(Clone, Debug)]
pub enum DataSource {
    Quadratic {
        problem: QuadraticProblem,
        init: DenseVector,
        batches_per_epoch: usize,
    },
    Ctr {
        model: LogisticEmbeddingModel,
        dataset: CtrDataset,
        days: usize,
    },
}

impl DataSource {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        match cfg.model {
            ModelSection::Quadratic {
                dim,
                a_min,
                a_max,
                sigma,
                theta,
                init_scale,
                problem_seed,
            } => {
                let noise = NoiseModel {
                    sigma,
                    theta,
                    batch_size: 1,
                };
                let problem = QuadraticProblem::spaced(dim, a_min, a_max, problem_seed, noise)?;
                let init = problem.initial_point(init_scale, problem_seed);
                Ok(DataSource::Quadratic {
                    problem,
                    init,
                    batches_per_epoch: cfg.data.batches_per_epoch,
                })
            }
            ModelSection::LogisticCtr { embed_dim } => {
                let ctr = cfg
                    .data
                    .ctr
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing [data.ctr]".into()))?;
                let dataset = CtrDataset::generate(ctr, cfg.data.seed)?;
                let model = LogisticEmbeddingModel {
                    dense_dim: ctr.dense_dim,
                    embed_dim,
                    vocab: ctr.zipf.vocab,
                };
                Ok(DataSource::Ctr {
                    model,
                    dataset,
                    days: cfg.data.days,
                })
            }
        }
    }

    /// Number of data days, if the task has them.
    pub fn days(&self) -> Option<usize> {
        match self {
            DataSource::Quadratic { .. } => None,
            DataSource::Ctr { days, .. } => Some(*days),
        }
    }

    /// Workload training on `day` with the given local batch. The quadratic
    /// noise stream is keyed by the run seed and day; CTR days train on one
    /// slice, shuffled under the run seed, and evaluate on the next.
    pub fn workload(&self, local_batch: usize, day: usize, run_seed: u64) -> Result<Box<dyn Workload>> {
        match self {
            DataSource::Quadratic {
                problem,
                init,
                batches_per_epoch,
            } => {
                let noise_seed = if day == 0 {
                    run_seed
                } else {
                    seed::derive(run_seed, &[day as u64])
                };
                Ok(Box::new(QuadWorkload::new(
                    problem.with_batch_size(local_batch),
                    init.clone(),
                    noise_seed,
                    *batches_per_epoch,
                )?))
            }
            DataSource::Ctr { model, dataset, days } => {
                if day + 1 >= *days {
                    return Err(Error::Config(format!("day {day} has no following evaluation day")));
                }
                let len = dataset.len() / days;
                let mut train = dataset.slice(day * len, len)?;
                train.seed = seed::derive(train.seed, &[run_seed]);
                let eval = dataset.slice((day + 1) * len, len)?;
                Ok(Box::new(CtrWorkload::new(*model, train, eval, local_batch, None)?))
            }
        }
    }
}

/// Result of one seed's run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub mode: ModeConfig,
    pub trace: Trace,
    pub checkpoint: Checkpoint,
    /// Held-out evaluation of the final parameters.
    pub final_eval: Evaluation,
}

/// How a run starts.
#[derive(Clone, Copy, Debug)]
pub enum Start<'a> {
    Fresh,
    /// Continue a checkpoint. The exact saved state resumes when mode, seed,
    /// day and step size all match; otherwise only the parameters (and the
    /// per-ID update tags) carry over, on fresh data for the current day.
    From(&'a Checkpoint),
}

/// Mode actually run: an unset GBA buffer is derived from the inherited
/// mode's global batch.
pub fn resolve_mode(mode: ModeConfig, start: Start<'_>) -> Result<ModeConfig> {
    let mode = match start {
        Start::From(c) => mode.resolve_against(&c.mode)?,
        Start::Fresh => mode,
    };
    mode.validate()?;
    Ok(mode)
}

pub struct TrainSpec<'a> {
    pub mode: ModeConfig,
    pub eta: f64,
    pub day: usize,
    pub steps: Option<u64>,
    pub epochs: Option<u64>,
    pub profiles: Vec<WorkerProfile>,
    pub sim: SimConfig,
    pub seed: u64,
    pub start: Start<'a>,
}

impl<'a> TrainSpec<'a> {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64, start: Start<'a>) -> Result<Self> {
        let mode = resolve_mode(cfg.mode, start)?;
        Ok(Self {
            mode,
            eta: cfg.run.eta,
            day: cfg.run.day,
            steps: cfg.run.steps,
            epochs: cfg.run.epochs,
            profiles: cfg.cluster.profiles(mode.workers()?)?,
            sim: cfg.sim_config(),
            seed,
            start,
        })
    }
}

pub fn train(source: &DataSource, spec: TrainSpec<'_>) -> Result<RunOutput> {
    let workload = source.workload(spec.mode.local_batch(), spec.day, spec.seed)?;
    let w = workload.as_ref();
    let mut sim = match spec.start {
        Start::From(c)
            if c.mode == spec.mode && c.seed == spec.seed && c.day == spec.day && c.eta == spec.eta =>
        {
            Simulator::resume(w, c.state.clone(), spec.profiles, spec.sim, spec.seed)?
        }
        Start::From(c) => {
            let init = w.init_params();
            let params = c.state.ps.params.clone();
            if params.dense.dim() != init.dense.dim() || params.embeddings.dim() != init.embeddings.dim() {
                return Err(Error::Config(format!(
                    "checkpoint shapes (dense {}, embedding {}) do not fit the model (dense {}, embedding {})",
                    params.dense.dim(),
                    params.embeddings.dim(),
                    init.dense.dim(),
                    init.embeddings.dim()
                )));
            }
            let mut ps = PsState::new(
                params,
                step_semantics(&spec.mode)?,
                spec.eta,
                DataList::new(w.batches_per_epoch(), 0, spec.epochs),
            )?;
            ps.id_tags = c.state.ps.id_tags.clone();
            Simulator::new(w, ps, spec.profiles, spec.sim, spec.seed)?
        }
        Start::Fresh => {
            let ps = PsState::new(
                w.init_params(),
                step_semantics(&spec.mode)?,
                spec.eta,
                DataList::new(w.batches_per_epoch(), 0, spec.epochs),
            )?;
            Simulator::new(w, ps, spec.profiles, spec.sim, spec.seed)?
        }
    };
    let target = spec.steps.map(|s| sim.global_step() + s);
    sim.run_until(target)?;
    let (trace, state) = sim.finish();
    let final_eval = w.evaluate(&state.ps.params)?;
    Ok(RunOutput {
        final_eval,
        seed: spec.seed,
        mode: spec.mode,
        checkpoint: Checkpoint {
            mode: spec.mode,
            seed: spec.seed,
            day: spec.day,
            eta: spec.eta,
            state,
        },
        trace,
    })
}

pub const METRICS_HEADER: &str = "step,sim_time,loss,auc,mean_staleness,max_staleness,dropped,global_qps";

/// One row per applied step. `step` counts updates applied so far; loss and
/// AUC are filled where an evaluation happened at that step; `dropped` and
/// `global_qps` are cumulative over the run.
pub fn write_metrics_csv<W: Write>(trace: &Trace, mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    let start = trace.summary.start_time;
    let b = trace.local_batch as f64;
    let (mut dropped, mut kept) = (0u64, 0u64);
    let (mut st_sum, mut st_max, mut st_n) = (0u64, 0u64, 0u64);
    let mut evals = trace.evals.iter().peekable();
    for r in &trace.records {
        match *r {
            Record::Drop { .. } => dropped += 1,
            Record::Entry { kept: k, staleness, .. } => {
                if k {
                    kept += 1;
                } else {
                    dropped += 1;
                }
                st_sum += staleness;
                st_max = st_max.max(staleness);
                st_n += 1;
            }
            Record::Apply { t, apply_step, .. } => {
                let step = apply_step + 1;
                while evals.peek().is_some_and(|e| e.step < step) {
                    evals.next();
                }
                let (loss, auc) = match evals.peek() {
                    Some(e) if e.step == step => (e.loss.to_string(), e.auc.map_or(String::new(), |a| a.to_string())),
                    _ => (String::new(), String::new()),
                };
                let qps = if t > start { kept as f64 * b / (t - start) } else { 0.0 };
                writeln!(
                    out,
                    "{step},{t},{loss},{auc},{},{st_max},{dropped},{qps}",
                    st_sum as f64 / st_n.max(1) as f64
                )?;
                (st_sum, st_max, st_n) = (0, 0, 0);
            }
            _ => {}
        }
    }
    Ok(())
}

/// Paths of one seed's outputs under `dir`.
pub struct OutputPaths {
    pub trace: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: &Path, stem: &str, seed: u64) -> Self {
        let base = format!("{stem}-seed{seed}");
        Self {
            trace: dir.join(format!("{base}.trace.jsonl")),
            metrics: dir.join(format!("{base}.metrics.csv")),
            checkpoint: dir.join(format!("{base}.ckpt")),
        }
    }
}

pub fn write_outputs(run: &RunOutput, paths: &OutputPaths) -> Result<()> {
    if let Some(parent) = paths.trace.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(&paths.trace)?);
    run.trace.write_jsonl(&mut f)?;
    f.flush()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&paths.metrics)?);
    write_metrics_csv(&run.trace, &mut f)?;
    f.flush()?;
    run.checkpoint.save(&paths.checkpoint)
}

/// Trains every configured seed and writes trace, metrics and checkpoint
/// files for each into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, from: Option<&Checkpoint>, out: &Path) -> Result<Vec<(RunOutput, OutputPaths)>> {
    let source = DataSource::from_config(cfg)?;
    let start = from.map_or(Start::Fresh, Start::From);
    let mut results = Vec::new();
    for &seed in &cfg.run.seeds {
        let spec = TrainSpec::from_config(cfg, seed, start)?;
        let run = train(&source, spec)?;
        let paths = OutputPaths::new(out, run.mode.name(), seed);
        write_outputs(&run, &paths)?;
        results.push((run, paths));
    }
    Ok(results)
}
