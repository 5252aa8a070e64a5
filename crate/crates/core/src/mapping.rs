//! Greedy core assignment that keeps heavily communicating subtasks together.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::partition::{SubtaskGraph, DRAM_NODE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mapping {
    pub n_cores: u32,
    pub core_of: BTreeMap<u32, u32>,
    pub load_cap: u32,
}

impl Mapping {
    pub fn core(&self, subtask: u32) -> u32 {
        self.core_of[&subtask]
    }

    /// Subtask ids per core, ascending.
    pub fn per_core(&self) -> Vec<Vec<u32>> {
        let mut cores = vec![Vec::new(); self.n_cores as usize];
        for (&st, &c) in &self.core_of {
            cores[c as usize].push(st);
        }
        cores
    }
}

/// Assigns subtasks to cores walking the graph from the outputs back to the
/// inputs. At equal distance from the outputs, subtasks with more incident
/// traffic go first. Each subtask joins the core holding the most bytes of
/// its already-placed neighbours, subject to a per-core cap of
/// `ceil(subtasks / cores)`.
pub fn map_subtasks(sg: &SubtaskGraph, n_cores: u32) -> Mapping {
    assert!(n_cores >= 1, "need at least one core");
    let n = sg.subtasks.len();
    let load_cap = n.div_ceil(n_cores as usize).max(1) as u32;

    let mut neighbours: Vec<Vec<(u32, u64)>> = vec![Vec::new(); n + 1];
    let mut incident = vec![0u64; n + 1];
    let mut succ: Vec<Vec<u32>> = vec![Vec::new(); n + 1];
    for e in sg.internal_edges() {
        succ[e.src as usize].push(e.dst);
        neighbours[e.src as usize].push((e.dst, e.bytes));
        neighbours[e.dst as usize].push((e.src, e.bytes));
        incident[e.src as usize] += e.bytes;
        incident[e.dst as usize] += e.bytes;
    }

    // Depth = longest path (in edges) to a sink.
    let order = sg.topo_order().expect("acyclic subtask graph");
    let mut depth = vec![0u32; n + 1];
    for &v in order.iter().rev() {
        depth[v as usize] = succ[v as usize]
            .iter()
            .map(|&s| depth[s as usize] + 1)
            .max()
            .unwrap_or(0);
    }

    let mut visit: Vec<u32> = (1..=n as u32).collect();
    visit.sort_by_key(|&v| (depth[v as usize], Reverse(incident[v as usize]), v));

    let mut core_of = BTreeMap::new();
    let mut load = vec![0u32; n_cores as usize];
    for v in visit {
        let mut affinity = vec![0u64; n_cores as usize];
        for &(u, bytes) in &neighbours[v as usize] {
            if let Some(&c) = core_of.get(&u) {
                affinity[c as usize] += bytes;
            }
        }
        let core = (0..n_cores)
            .filter(|&c| load[c as usize] < load_cap)
            .max_by_key(|&c| (affinity[c as usize], Reverse(load[c as usize]), Reverse(c)))
            .expect("load cap leaves room");
        core_of.insert(v, core);
        load[core as usize] += 1;
    }

    Mapping {
        n_cores,
        core_of,
        load_cap,
    }
}

/// Bytes that cross a core boundary: inter-core edges plus every
/// external-memory edge.
pub fn cross_core_bytes(sg: &SubtaskGraph, m: &Mapping) -> u64 {
    sg.edges
        .iter()
        .filter(|e| e.src == DRAM_NODE || e.dst == DRAM_NODE || m.core(e.src) != m.core(e.dst))
        .map(|e| e.bytes)
        .sum()
}
