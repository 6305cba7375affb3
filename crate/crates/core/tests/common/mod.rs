#![allow(dead_code)]

use gba_lab::model::{NoiseModel, QuadraticProblem};
use gba_lab::modes::ModeConfig;
use gba_lab::ps::PsState;
use gba_lab::sim::{self, SimConfig, Trace, WorkerProfile};
use gba_lab::workload::QuadWorkload;

pub fn quad(dim: usize, batch: usize, sigma: f64, seed: u64) -> QuadWorkload {
    let problem = QuadraticProblem::spaced(
        dim,
        0.5,
        1.0,
        seed,
        NoiseModel {
            sigma,
            theta: 0.0,
            batch_size: batch,
        },
    )
    .unwrap();
    let init = problem.initial_point(1.0, seed);
    QuadWorkload::new(problem, init, seed, 1000).unwrap()
}

pub fn state(w: &QuadWorkload, mode: ModeConfig, eta: f64) -> PsState {
    sim::initial_state(w, &mode, eta, None).unwrap()
}

pub fn run(w: &QuadWorkload, mode: ModeConfig, times: &[f64], steps: u64, seed: u64) -> Trace {
    run_with(w, mode, WorkerProfile::constants(times), SimConfig::default(), steps, seed)
}

pub fn run_with(
    w: &QuadWorkload,
    mode: ModeConfig,
    profiles: Vec<WorkerProfile>,
    config: SimConfig,
    steps: u64,
    seed: u64,
) -> Trace {
    sim::run(w, state(w, mode, 0.05), profiles, config, seed, Some(steps)).unwrap()
}

pub fn gba(m: usize, b: usize, iota: Option<u64>) -> ModeConfig {
    ModeConfig::Gba {
        buffer: Some(m),
        local_batch: b,
        iota,
    }
}

pub fn sync(n: usize, b: usize) -> ModeConfig {
    ModeConfig::Sync {
        workers: n,
        local_batch: b,
    }
}

pub fn asynchronous(n: usize, b: usize) -> ModeConfig {
    ModeConfig::Async {
        workers: n,
        local_batch: b,
    }
}
