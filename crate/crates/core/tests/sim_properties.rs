mod common;

use common::*;
use gba_lab::modes::{step_semantics, ModeConfig};
use gba_lab::sim::{ComputeTime, Record, SimConfig, WorkerProfile};
use proptest::prelude::*;

fn mode(kind: u8, n: usize, extra: usize) -> ModeConfig {
    let local_batch = 4;
    match kind {
        0 => sync(n, local_batch),
        1 => asynchronous(n, local_batch),
        2 => ModeConfig::Bsp {
            workers: n,
            local_batch,
            b2: 1 + extra % n,
        },
        3 => ModeConfig::HopBs {
            workers: n,
            local_batch,
            b1: extra as u64 % 3,
        },
        4 => ModeConfig::HopBw {
            workers: n,
            local_batch,
            b3: extra % n,
        },
        _ => gba(n, local_batch, if extra.is_multiple_of(3) { None } else { Some(extra as u64 % 3) }),
    }
}

fn profiles(medians: &[f64], sigma: f64) -> Vec<WorkerProfile> {
    medians
        .iter()
        .map(|&median| WorkerProfile {
            compute: ComputeTime::Lognormal { median, sigma },
            slowdown: vec![],
            failures: vec![],
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn runs_are_deterministic_and_conserve_gradients(
        kind in 0u8..6,
        medians in proptest::collection::vec(0.2f64..3.0, 1..5),
        sigma in 0.0f64..0.8,
        extra in 0usize..6,
        steps in 1u64..40,
        seed in 0u64..1000,
    ) {
        let n = medians.len();
        let m = mode(kind, n, extra);
        let policy = step_semantics(&m).unwrap();
        let w = quad(4, 4, 0.5, seed);
        let a = run_with(&w, m, profiles(&medians, sigma), SimConfig::default(), steps, seed);
        let b = run_with(&w, m, profiles(&medians, sigma), SimConfig::default(), steps, seed);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.reports.len() as u64, steps);

        let mut pushes = 0u64;
        let mut settled = 0u64;
        let mut last_t = 0.0;
        let mut entries_in_step = 0usize;
        for r in &a.records {
            if !matches!(r, Record::Summary(_)) {
                prop_assert!(r.time() >= last_t);
                last_t = r.time();
            }
            match *r {
                Record::Push { .. } => pushes += 1,
                Record::Drop { .. } => settled += 1,
                Record::Entry { staleness, .. } => {
                    settled += 1;
                    entries_in_step += 1;
                    if kind == 0 {
                        prop_assert_eq!(staleness, 0);
                    }
                }
                Record::Apply { .. } => {
                    prop_assert_eq!(entries_in_step, policy.trigger);
                    entries_in_step = 0;
                }
                _ => {}
            }
        }
        prop_assert!(settled <= pushes);
        prop_assert!(pushes - settled < policy.trigger as u64 + n as u64);
        if kind == 5 && extra % 3 == 0 {
            prop_assert!(a.reports.iter().all(|r| r.dropped == 0));
        }
        prop_assert!(a.final_params.dense.is_finite());
    }
}
