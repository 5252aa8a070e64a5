//! End-to-end compilation: fuse, partition, map, estimate, schedule.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::mapping::{cross_core_bytes, map_subtasks, Mapping};
use crate::model::{fuse_operators, ModelGraph};
use crate::partition::{build_subtask_graph_with_budget, SubtaskGraph};
use crate::schedule::{build_schedule, Schedule};
use crate::timing::{estimate_costs, CostEstimate, HardwareConfig, WcetOverrides};
use crate::Error;

#[derive(Debug, Clone, Default)]
pub struct CompileOptions {
    /// Per-tile scratchpad budget; half the data scratchpad when unset.
    pub tile_budget_bytes: Option<u64>,
    pub overrides: WcetOverrides,
}

#[derive(Debug, Clone)]
pub struct Compiled {
    pub fused: ModelGraph,
    pub subtasks: SubtaskGraph,
    pub mapping: Mapping,
    pub costs: BTreeMap<u32, CostEstimate>,
    pub schedule: Schedule,
}

pub fn compile(
    g: &ModelGraph,
    hw: &HardwareConfig,
    opts: &CompileOptions,
) -> Result<Compiled, Error> {
    hw.validate()?;
    let fused = fuse_operators(g);
    let budget = opts
        .tile_budget_bytes
        .unwrap_or_else(|| hw.tile_budget_bytes());
    let subtasks = build_subtask_graph_with_budget(&fused, hw, budget)?;
    let mapping = map_subtasks(&subtasks, hw.n_cores);
    let costs = estimate_costs(&subtasks, hw, &opts.overrides)?;
    let schedule = build_schedule(&subtasks, &mapping, &costs, hw)?;
    Ok(Compiled {
        fused,
        subtasks,
        mapping,
        costs,
        schedule,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CoreLoad {
    pub core: u32,
    pub subtasks: Vec<u32>,
    pub compute_cycles: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerTiles {
    pub layer: String,
    pub subtasks: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MappingReport {
    pub n_cores: u32,
    pub load_cap: u32,
    pub subtasks: usize,
    pub cross_core_bytes: u64,
    pub predicted_makespan: u64,
    pub cores: Vec<CoreLoad>,
    pub layers: Vec<LayerTiles>,
}

impl MappingReport {
    pub fn new(c: &Compiled) -> Self {
        let cores = c
            .mapping
            .per_core()
            .into_iter()
            .enumerate()
            .map(|(core, subtasks)| CoreLoad {
                core: core as u32,
                compute_cycles: subtasks.iter().map(|s| c.costs[s].wcet_cycles).sum(),
                subtasks,
            })
            .collect();
        let layers = c
            .subtasks
            .layer_order
            .iter()
            .map(|l| LayerTiles {
                layer: l.clone(),
                subtasks: c
                    .subtasks
                    .subtasks
                    .iter()
                    .filter(|s| &s.layer_id == l)
                    .map(|s| s.id)
                    .collect(),
            })
            .collect();
        MappingReport {
            n_cores: c.mapping.n_cores,
            load_cap: c.mapping.load_cap,
            subtasks: c.subtasks.subtasks.len(),
            cross_core_bytes: cross_core_bytes(&c.subtasks, &c.mapping),
            predicted_makespan: c.schedule.makespan,
            cores,
            layers,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
