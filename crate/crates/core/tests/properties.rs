mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttdeploy::mapping::map_subtasks;
use ttdeploy::model::fuse_operators;
use ttdeploy::partition::{
    build_subtask_graph_with_budget, footprint_bytes, tile_with, GemmDims, SubtaskGraph, TileKind,
};
use ttdeploy::reference::execute_reference;
use ttdeploy::schedule::check::run_checks;
use ttdeploy::schedule::{build_schedule, Schedule, ScheduleError};
use ttdeploy::sim::{simulate, ExecutionProfile};
use ttdeploy::timing::{
    estimate_costs, gemm_tile_wcet, stream_tile_wcet, transfer_cycles, HardwareConfig, Route,
};

use common::*;

/// A random model pushed through partitioning, mapping and scheduling.
fn pipeline(seed: u64) -> Option<(SubtaskGraph, HardwareConfig, Schedule)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = random_model(&mut rng, 6, 0.3);
    let hw = random_hw(&mut rng);
    let budget = [128u64, 512, 2048, hw.spm_data_bytes][rng.gen_range(0..4)].min(hw.spm_data_bytes);
    let sg = build_subtask_graph_with_budget(&fuse_operators(&m.graph), &hw, budget).ok()?;
    let mapping = map_subtasks(&sg, hw.n_cores);
    let costs = estimate_costs(&sg, &hw, &random_overrides(&mut rng, sg.subtasks.len())).unwrap();
    match build_schedule(&sg, &mapping, &costs, &hw) {
        Ok(s) => Some((sg, hw, s)),
        Err(ScheduleError::Overflow { .. }) => None,
        Err(e) => panic!("{e}"),
    }
}

fn kind_strategy() -> impl Strategy<Value = TileKind> {
    prop_oneof![
        Just(TileKind::Gemm),
        (1u64..=9).prop_map(|in_per_out| TileKind::Stream { in_per_out }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn transfer_cycles_monotone_in_bytes(a in 1u64..1_000_000, b in 1u64..1_000_000, seed: u64) {
        let hw = random_hw(&mut ChaCha8Rng::seed_from_u64(seed));
        let (lo, hi) = (a.min(b), a.max(b));
        for route in [Route::Dram, Route::SpmToSpm] {
            prop_assert!(transfer_cycles(lo, route, &hw).unwrap() <= transfer_cycles(hi, route, &hw).unwrap());
        }
        prop_assert!(transfer_cycles(lo, Route::SpmToSpm, &hw).unwrap() <= transfer_cycles(lo, Route::Dram, &hw).unwrap());
    }

    #[test]
    fn tile_wcet_monotone(mt in 1u64..512, nt in 1u64..512, k in 1u64..512, dm in 0u64..8, dn in 0u64..80, dk in 0u64..8, seed: u64) {
        let hw = random_hw(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(gemm_tile_wcet(mt, nt, k, &hw) <= gemm_tile_wcet(mt + dm, nt + dn, k + dk, &hw));
        prop_assert!(stream_tile_wcet(mt, nt, &hw) <= stream_tile_wcet(mt + dm, nt + dn, &hw));
    }

    #[test]
    fn tiles_cover_exactly_within_budget(
        m in 1u64..200, n in 1u64..200, k in 1u64..300,
        kind in kind_strategy(), lanes in prop::sample::select(vec![8u64, 16, 32, 64]),
        budget in 64u64..200_000,
    ) {
        let k = if kind == TileKind::Gemm { k } else { 1 };
        match tile_with(GemmDims { m, n, k }, kind, budget, lanes) {
            Ok(tiles) => {
                let mut hits = vec![0u8; (m * n) as usize];
                for t in &tiles {
                    prop_assert!(footprint_bytes(kind, k, t.mt, t.nt) <= budget);
                    prop_assert!(t.m0 + t.mt <= m && t.n0 + t.nt <= n);
                    for r in t.m0..t.m0 + t.mt {
                        for c in t.n0..t.n0 + t.nt {
                            hits[(r * n + c) as usize] += 1;
                        }
                    }
                }
                prop_assert!(hits.iter().all(|&h| h == 1));
            }
            Err(e) => {
                prop_assert!(e.required > budget);
                prop_assert_eq!(e.required, footprint_bytes(kind, k, 1, n.min(lanes)));
            }
        }
    }

    #[test]
    fn mapping_respects_load_cap_and_is_deterministic(seed: u64, n in 0u32..40, cores in 1u32..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sg = random_subtask_graph(&mut rng, n, 0.3);
        let m = map_subtasks(&sg, cores);
        prop_assert_eq!(m.load_cap, (n.div_ceil(cores)).max(1));
        prop_assert_eq!(m.core_of.len() as u32, n);
        let per = m.per_core();
        prop_assert!(per.iter().all(|c| c.len() as u32 <= m.load_cap));
        prop_assert_eq!(map_subtasks(&sg, cores), m);
    }

    #[test]
    fn every_emitted_schedule_passes_all_checks(seed: u64) {
        if let Some((_, _, s)) = pipeline(seed) {
            let failed: Vec<_> = run_checks(&s).into_iter().filter(|r| !r.ok).collect();
            prop_assert!(failed.is_empty(), "{:?}", failed);
        }
    }

    #[test]
    fn raising_one_wcet_never_lowers_makespan(seed: u64, extra in 1u64..20_000, pick: prop::sample::Index) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=8);
        let sg = random_subtask_graph(&mut rng, n, 0.4);
        let n_cores = rng.gen_range(1..=3);
        let hw = HardwareConfig {
            n_cores,
            spm_data_bytes: *[2048u64, 4096, 1 << 20].get(rng.gen_range(0..3)).unwrap(),
            ..HardwareConfig::default()
        };
        let mapping = map_subtasks(&sg, n_cores);
        let wcets: Vec<u64> = (0..n).map(|_| rng.gen_range(1..=5000)).collect();
        let mut raised = wcets.clone();
        raised[pick.index(n as usize)] += extra;
        let base = build_schedule(&sg, &mapping, &fixed_costs(&wcets), &hw);
        let more = build_schedule(&sg, &mapping, &fixed_costs(&raised), &hw);
        if let (Ok(a), Ok(b)) = (base, more) {
            prop_assert!(b.makespan >= a.makespan, "{} < {}", b.makespan, a.makespan);
        }
    }

    #[test]
    fn simulation_is_deterministic(seed: u64, sim_seed: u64, min in 0.01f64..=1.0) {
        if let Some((_, _, s)) = pipeline(seed) {
            let p = ExecutionProfile::Random { seed: sim_seed, min };
            let a = simulate(&s, &p).unwrap();
            let b = simulate(&s, &p).unwrap();
            prop_assert_eq!(a.to_json(), b.to_json());
            prop_assert!(a.observed_makespan <= s.makespan);
        }
    }

    #[test]
    fn schedule_json_round_trips(seed: u64) {
        if let Some((_, _, s)) = pipeline(seed) {
            let text = s.to_json();
            let back = Schedule::from_json(&text).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_json(), text);
        }
    }

    #[test]
    fn fusion_preserves_outputs(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_model(&mut rng, 6, 0.6);
        let x = random_input(&mut rng, m.graph.input);
        let fused = fuse_operators(&m.graph);
        prop_assert_eq!(
            execute_reference(&m.graph, &x, &m.weights).unwrap(),
            execute_reference(&fused, &x, &m.weights).unwrap()
        );
    }

    #[test]
    fn override_replaces_analytic_cost(seed: u64, cycles in 1u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sg = random_subtask_graph(&mut rng, 3, 0.5);
        let hw = HardwareConfig::default();
        let o = ttdeploy::timing::WcetOverrides(BTreeMap::from([(2, cycles)]));
        let costs = estimate_costs(&sg, &hw, &o).unwrap();
        prop_assert_eq!(costs[&2].wcet_cycles, cycles);
    }
}
