use crate::mapping::Mapping;
use crate::partition::{Edge, Subtask, SubtaskGraph, Tile, TileKind};
use crate::timing::{CostBasis, CostEstimate, HardwareConfig};

use super::{build_schedule, Schedule};

/// Two subtasks on one core: S1 (1000 cycles, 100 B load) feeds S2
/// (2000 cycles, 800 B load) whose 128 B result is stored.
pub(crate) fn chain() -> Schedule {
    let st = |id| Subtask {
        id,
        layer_id: format!("l{id}"),
        kind: TileKind::Gemm,
        k: 1,
        tile: Tile {
            m0: 0,
            mt: 1,
            n0: 0,
            nt: 1,
        },
        dram_in_bytes: 0,
        spm_footprint_bytes: 1024,
        out_bytes: 128,
    };
    let sg = SubtaskGraph {
        subtasks: vec![st(1), st(2)],
        edges: [(0, 1, 100), (0, 2, 800), (1, 2, 64), (2, 0, 128)]
            .iter()
            .map(|&(src, dst, bytes)| Edge { src, dst, bytes })
            .collect(),
        layer_order: vec!["l1".into(), "l2".into()],
    };
    let costs = [(1, 1000), (2, 2000)]
        .iter()
        .map(|&(i, c)| {
            (
                i,
                CostEstimate {
                    wcet_cycles: c,
                    derived_from: CostBasis::Override { analytic_cycles: c },
                },
            )
        })
        .collect();
    let m = Mapping {
        n_cores: 1,
        core_of: [(1, 0), (2, 0)].into_iter().collect(),
        load_cap: 2,
    };
    let hw = HardwareConfig {
        n_cores: 1,
        ..HardwareConfig::default()
    };
    build_schedule(&sg, &m, &costs, &hw).unwrap()
}
