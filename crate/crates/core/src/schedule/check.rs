//! Structural validation and invariant checks over a schedule artifact.
//!
//! Structural problems (dangling ids, cores out of range) make an artifact
//! unusable. Invariant failures describe a well-formed but unsafe schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{Endpoint, RegionRole, Schedule, SpmRegion, TransferEvent, TransferKind};
use crate::timing::transfer_cycles;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub ok: bool,
    pub details: Vec<String>,
}

/// Precedence relations recovered from an artifact.
#[derive(Debug, Clone, Default)]
pub struct Deps {
    /// Transfers each compute waits for (inbound data and program image).
    pub compute_transfers: BTreeMap<u32, Vec<u32>>,
    /// Same-core producers read in place.
    pub compute_locals: BTreeMap<u32, Vec<u32>>,
    /// Internal edges with no transfer and no shared core.
    pub undelivered: Vec<(u32, u32)>,
}

pub fn validate_structure(s: &Schedule) -> Result<(), String> {
    s.hw.validate().map_err(|e| e.to_string())?;
    s.graph.validate().map_err(|e| e.to_string())?;
    let nc = s.hw.n_cores;
    let n = s.graph.subtasks.len() as u32;
    let known = |id: u32| id >= 1 && id <= n;

    if s.mapping.n_cores != nc {
        return Err(format!(
            "mapping has {} cores, hardware {}",
            s.mapping.n_cores, nc
        ));
    }
    if s.mapping.core_of.len() as u32 != n || !(1..=n).all(|i| s.mapping.core_of.contains_key(&i)) {
        return Err("mapping does not cover every subtask".into());
    }
    if let Some((st, c)) = s.mapping.core_of.iter().find(|(_, &c)| c >= nc) {
        return Err(format!("subtask {st} mapped to missing core {c}"));
    }

    let mut seen = BTreeSet::new();
    for c in &s.computes {
        if !known(c.subtask) || !seen.insert(c.subtask) {
            return Err(format!(
                "compute for unknown or repeated subtask {}",
                c.subtask
            ));
        }
        if c.core >= nc {
            return Err(format!("compute {} on missing core {}", c.subtask, c.core));
        }
        if c.wcet == 0 {
            return Err(format!("compute {} has zero wcet", c.subtask));
        }
    }
    if seen.len() as u32 != n {
        return Err("some subtasks have no compute event".into());
    }

    let ids: BTreeSet<u32> = s.transfers.iter().map(|t| t.id).collect();
    if ids.len() != s.transfers.len() {
        return Err("duplicate transfer id".into());
    }
    for t in &s.transfers {
        if t.bytes == 0 {
            return Err(format!("transfer {} moves zero bytes", t.id));
        }
        if let Some(id) = t.serves.iter().find(|&&id| !known(id)) {
            return Err(format!("transfer {} serves unknown subtask {id}", t.id));
        }
        if let Some(p) = t.produced_by.filter(|&p| !known(p)) {
            return Err(format!("transfer {} reads unknown subtask {p}", t.id));
        }
        if let Some(a) = t.after.filter(|a| !ids.contains(a)) {
            return Err(format!("transfer {} waits on unknown transfer {a}", t.id));
        }
        for e in [t.src, t.dst] {
            if e.core().is_some_and(|c| c >= nc) {
                return Err(format!("transfer {} touches missing core", t.id));
            }
        }
    }

    if s.spm_regions.len() as u32 != nc {
        return Err(format!(
            "{} region lists for {} cores",
            s.spm_regions.len(),
            nc
        ));
    }
    for r in s.spm_regions.iter().flatten() {
        if !known(r.owner) {
            return Err(format!("region owned by unknown subtask {}", r.owner));
        }
    }
    Ok(())
}

fn endpoint_len(e: &Endpoint) -> u64 {
    match *e {
        Endpoint::Dram { len, .. } | Endpoint::Spm { len, .. } | Endpoint::Imem { len, .. } => len,
    }
}

/// Inbound transfers of compute `j`: loads and copies landing on its core
/// that list it in `serves`.
fn is_inbound(t: &TransferEvent, j: u32, core: u32) -> bool {
    t.kind != TransferKind::StoreDram && t.dst.core() == Some(core) && t.serves.contains(&j)
}

/// Assumes [`validate_structure`] passed.
pub fn derive_deps(s: &Schedule) -> Deps {
    let mut deps = Deps::default();
    for st in &s.graph.subtasks {
        let j = st.id;
        let core = s.mapping.core(j);
        let inbound: Vec<&TransferEvent> = s
            .transfers
            .iter()
            .filter(|t| is_inbound(t, j, core))
            .collect();
        deps.compute_transfers
            .insert(j, inbound.iter().map(|t| t.id).collect());
        let mut locals = Vec::new();
        for e in s.graph.internal_edges().filter(|e| e.dst == j) {
            let delivered = inbound.iter().any(|t| t.produced_by == Some(e.src));
            if delivered {
                continue;
            }
            if s.mapping.core(e.src) == core {
                locals.push(e.src);
            } else {
                deps.undelivered.push((e.src, j));
            }
        }
        deps.compute_locals.insert(j, locals);
    }
    deps
}

fn result(name: &'static str, details: Vec<String>) -> CheckResult {
    CheckResult {
        name,
        ok: details.is_empty(),
        details,
    }
}

fn check_durations(s: &Schedule) -> CheckResult {
    let mut bad = Vec::new();
    for t in &s.transfers {
        match transfer_cycles(t.bytes, t.kind.route(), &s.hw) {
            Ok(d) if d == t.dur => {}
            Ok(d) => bad.push(format!(
                "transfer {} lasts {} cycles, bound is {d}",
                t.id, t.dur
            )),
            Err(e) => bad.push(format!("transfer {}: {e}", t.id)),
        }
        if endpoint_len(&t.src) != t.bytes || endpoint_len(&t.dst) != t.bytes {
            bad.push(format!(
                "transfer {} endpoint lengths differ from its size",
                t.id
            ));
        }
        let kind_ok = match t.kind {
            TransferKind::LoadDram => {
                matches!(t.src, Endpoint::Dram { .. }) && !matches!(t.dst, Endpoint::Dram { .. })
            }
            TransferKind::StoreDram => {
                matches!(t.src, Endpoint::Spm { .. }) && matches!(t.dst, Endpoint::Dram { .. })
            }
            TransferKind::CopySpm => {
                matches!(t.src, Endpoint::Spm { .. }) && matches!(t.dst, Endpoint::Spm { .. })
            }
        };
        if !kind_ok {
            bad.push(format!("transfer {} endpoints do not match its kind", t.id));
        }
    }
    result("transfer_duration", bad)
}

fn check_dma_exclusive(s: &Schedule) -> CheckResult {
    let mut ts: Vec<&TransferEvent> = s.transfers.iter().collect();
    ts.sort_by_key(|t| (t.start, t.id));
    let bad = ts
        .windows(2)
        .filter(|w| w[1].start < w[0].end())
        .map(|w| {
            format!(
                "transfers {} and {} overlap on the DMA engine",
                w[0].id, w[1].id
            )
        })
        .collect();
    result("dma_overlap", bad)
}

fn check_core_exclusive(s: &Schedule) -> CheckResult {
    let mut bad = Vec::new();
    let mut per_core: BTreeMap<u32, Vec<(u64, u64, u32)>> = BTreeMap::new();
    for c in &s.computes {
        if s.mapping.core(c.subtask) != c.core {
            bad.push(format!("subtask {} runs off its mapped core", c.subtask));
        }
        per_core
            .entry(c.core)
            .or_default()
            .push((c.start, c.end(), c.subtask));
    }
    for (core, mut v) in per_core {
        v.sort_unstable();
        for w in v.windows(2) {
            if w[1].0 < w[0].1 {
                bad.push(format!(
                    "subtasks {} and {} overlap on core {core}",
                    w[0].2, w[1].2
                ));
            }
        }
    }
    result("core_overlap", bad)
}

fn check_dependencies(s: &Schedule, deps: &Deps) -> CheckResult {
    let mut bad = Vec::new();
    let end_of_compute: BTreeMap<u32, u64> =
        s.computes.iter().map(|c| (c.subtask, c.end())).collect();
    let end_of_transfer: BTreeMap<u32, u64> = s.transfers.iter().map(|t| (t.id, t.end())).collect();
    for c in &s.computes {
        for id in &deps.compute_transfers[&c.subtask] {
            if end_of_transfer[id] > c.start {
                bad.push(format!(
                    "subtask {} starts before transfer {id} ends",
                    c.subtask
                ));
            }
        }
        for p in &deps.compute_locals[&c.subtask] {
            if end_of_compute[p] > c.start {
                bad.push(format!(
                    "subtask {} starts before producer {p} ends",
                    c.subtask
                ));
            }
        }
    }
    for t in &s.transfers {
        if let Some(p) = t.produced_by {
            if end_of_compute[&p] > t.start {
                bad.push(format!("transfer {} starts before producer {p} ends", t.id));
            }
        }
        if let Some(a) = t.after {
            if end_of_transfer[&a] > t.start {
                bad.push(format!("transfer {} starts before transfer {a} ends", t.id));
            }
        }
    }
    result("dependency_unready", bad)
}

fn check_coverage(s: &Schedule, deps: &Deps) -> CheckResult {
    let mut bad: Vec<String> = deps
        .undelivered
        .iter()
        .map(|(i, j)| format!("no transfer carries {i}->{j} across cores"))
        .collect();
    for st in &s.graph.subtasks {
        let core = s.mapping.core(st.id);
        let loaded = s
            .transfers
            .iter()
            .any(|t| is_inbound(t, st.id, core) && t.produced_by.is_none() && !t.is_program_load());
        if s.graph.dram_in(st.id) > 0 && !loaded {
            bad.push(format!("subtask {} never loads its DRAM inputs", st.id));
        }
        let stored = s.transfers.iter().any(|t| {
            t.kind == TransferKind::StoreDram
                && t.produced_by == Some(st.id)
                && !s.transfers.iter().any(|r| r.after == Some(t.id))
        });
        if s.graph.dram_out(st.id) > 0 && !stored {
            bad.push(format!("subtask {} never stores its output", st.id));
        }
    }
    if s.hw.include_program_load {
        for (core, subs) in s.mapping.per_core().iter().enumerate() {
            let has = s
                .transfers
                .iter()
                .any(|t| t.is_program_load() && t.dst.core() == Some(core as u32));
            if !subs.is_empty() && !has {
                bad.push(format!("core {core} never receives its program image"));
            }
        }
    }
    result("undelivered_data", bad)
}

fn overlaps(a: &SpmRegion, b: &SpmRegion) -> bool {
    a.start < b.end && b.start < a.end && a.offset < b.offset + b.len && b.offset < a.offset + a.len
}

fn check_capacity(s: &Schedule) -> CheckResult {
    let cap = s.hw.spm_data_bytes;
    let mut bad = Vec::new();
    for (core, regions) in s.spm_regions.iter().enumerate() {
        for r in regions {
            if r.offset + r.len > cap {
                bad.push(format!(
                    "core {core}: region of {} ends at {} beyond {cap}",
                    r.owner,
                    r.offset + r.len
                ));
            }
        }
        for (a, ra) in regions.iter().enumerate() {
            for rb in &regions[a + 1..] {
                if overlaps(ra, rb) {
                    bad.push(format!(
                        "core {core}: regions of {} and {} collide",
                        ra.owner, rb.owner
                    ));
                }
            }
            let live: u64 = regions
                .iter()
                .filter(|r| r.start <= ra.start && ra.start < r.end)
                .map(|r| r.len)
                .sum();
            if live > cap {
                bad.push(format!(
                    "core {core}: {live} bytes live at cycle {}",
                    ra.start
                ));
            }
        }
    }
    result("spm_overflow", bad)
}

fn check_endpoints(s: &Schedule) -> CheckResult {
    let mut bad = Vec::new();
    let inside = |e: &Endpoint, owner: u32, role: RegionRole, t: &TransferEvent| match *e {
        Endpoint::Spm { core, offset, len } => s.spm_regions[core as usize].iter().any(|r| {
            r.owner == owner
                && r.role == role
                && r.offset <= offset
                && offset + len <= r.offset + r.len
                && r.start <= t.start
                && t.end() <= r.end
        }),
        _ => true,
    };
    for t in &s.transfers {
        if let Some(p) = t.produced_by {
            if !inside(&t.src, p, RegionRole::Out, t) {
                bad.push(format!("transfer {} reads outside the output of {p}", t.id));
            }
        }
        if matches!(t.dst, Endpoint::Spm { .. }) {
            let ok = t
                .serves
                .iter()
                .any(|&j| inside(&t.dst, j, RegionRole::Tile, t));
            if !ok {
                bad.push(format!(
                    "transfer {} writes outside its consumer's tile",
                    t.id
                ));
            }
        }
        if let Endpoint::Imem { offset, len, .. } = t.dst {
            if offset + len > s.hw.spm_instr_bytes {
                bad.push(format!("transfer {} overruns instruction memory", t.id));
            }
        }
    }
    result("spm_endpoint", bad)
}

fn check_makespan(s: &Schedule) -> CheckResult {
    let m = s.recompute_makespan();
    let bad = if m == s.makespan {
        vec![]
    } else {
        vec![format!("recorded makespan {} differs from {m}", s.makespan)]
    };
    result("makespan_mismatch", bad)
}

fn check_sorted(s: &Schedule) -> CheckResult {
    let mut bad = Vec::new();
    if !s
        .transfers
        .windows(2)
        .all(|w| (w[0].start, w[0].id) < (w[1].start, w[1].id))
    {
        bad.push("transfers not ordered by (start, id)".into());
    }
    if !s
        .computes
        .windows(2)
        .all(|w| (w[0].start, w[0].subtask) < (w[1].start, w[1].subtask))
    {
        bad.push("computes not ordered by (start, subtask)".into());
    }
    result("unsorted", bad)
}

/// Runs every invariant check. Assumes [`validate_structure`] passed.
pub fn run_checks(s: &Schedule) -> Vec<CheckResult> {
    let deps = derive_deps(s);
    vec![
        check_durations(s),
        check_dma_exclusive(s),
        check_core_exclusive(s),
        check_dependencies(s, &deps),
        check_coverage(s, &deps),
        check_capacity(s),
        check_endpoints(s),
        check_makespan(s),
        check_sorted(s),
    ]
}
