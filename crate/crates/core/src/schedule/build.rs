//! Schedule construction.
//!
//! The DMA engine serves transfers in a fixed order that depends only on the
//! graph, the mapping and the allocation plan, never on cycle counts:
//! program images first, then per layer all inbound transfers of the layer's
//! subtasks followed by its outbound stores, each phase interleaved round-robin
//! over cores. Start times are then the max-plus closure of that order, so
//! raising any WCET can only delay events.

use std::collections::{BTreeMap, VecDeque};

use super::alloc::{first_fit, RegionRequest};
use super::{
    ComputeEvent, Endpoint, RegionRole, Schedule, ScheduleError, SpmRegion, TransferEvent,
    TransferKind,
};
use crate::mapping::Mapping;
use crate::partition::SubtaskGraph;
use crate::timing::{transfer_cycles, CostEstimate, HardwareConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Job {
    Program { core: u32 },
    Load { dst: u32 },
    Copy { src: u32, dst: u32 },
    Reload { src: u32, dst: u32 },
    Store { src: u32 },
    Spill { src: u32 },
}

impl Job {
    fn kind(self) -> TransferKind {
        match self {
            Job::Program { .. } | Job::Load { .. } | Job::Reload { .. } => TransferKind::LoadDram,
            Job::Store { .. } | Job::Spill { .. } => TransferKind::StoreDram,
            Job::Copy { .. } => TransferKind::CopySpm,
        }
    }

    /// Subtask whose tile region receives the data.
    fn consumer(self) -> Option<u32> {
        match self {
            Job::Load { dst } | Job::Copy { dst, .. } | Job::Reload { dst, .. } => Some(dst),
            _ => None,
        }
    }

    /// Subtask whose output region is read.
    fn reads_output_of(self) -> Option<u32> {
        match self {
            Job::Copy { src, .. } | Job::Store { src } | Job::Spill { src } => Some(src),
            _ => None,
        }
    }
}

/// Allocation decisions taken so far.
#[derive(Debug, Clone)]
struct Plan {
    /// Inbound transfers wait for the previous subtask on the core to finish.
    no_prefetch: Vec<bool>,
    /// Output goes through DRAM even for consumers on the same core.
    spilled: Vec<bool>,
}

struct Ctx<'a> {
    sg: &'a SubtaskGraph,
    hw: &'a HardwareConfig,
    n: usize,
    core: Vec<u32>,
    wcet: Vec<u64>,
    prev: Vec<Option<u32>>,
    /// Internal producers of each subtask with edge bytes, in edge order.
    inbound: Vec<Vec<(u32, u64)>>,
    local_consumers: Vec<Vec<u32>>,
    dram_in: Vec<u64>,
    dram_out: Vec<u64>,
    by_layer: Vec<Vec<u32>>,
    on_core: Vec<Vec<u32>>,
}

struct Timeline {
    jobs: Vec<(Job, u64)>,
    start: Vec<u64>,
    dur: Vec<u64>,
    placed: Vec<bool>,
    cstart: Vec<u64>,
    cdone: Vec<bool>,
    serving: Vec<Vec<usize>>,
    readers: Vec<Vec<usize>>,
    program: Vec<Option<usize>>,
    spill_job: Vec<Option<usize>>,
}

impl Timeline {
    fn end(&self, x: usize) -> u64 {
        self.start[x] + self.dur[x]
    }
}

fn interleave(queues: Vec<VecDeque<(Job, u64)>>, last: &mut usize, out: &mut Vec<(Job, u64)>) {
    let mut queues = queues;
    let nc = queues.len();
    loop {
        let next = (1..=nc)
            .map(|off| (*last + off) % nc)
            .find(|&c| !queues[c].is_empty());
        let Some(c) = next else { break };
        out.push(queues[c].pop_front().unwrap());
        *last = c;
    }
}

impl<'a> Ctx<'a> {
    fn new(
        sg: &'a SubtaskGraph,
        m: &Mapping,
        costs: &BTreeMap<u32, CostEstimate>,
        hw: &'a HardwareConfig,
    ) -> Self {
        let n = sg.subtasks.len();
        let mut core = vec![0u32; n + 1];
        let mut wcet = vec![0u64; n + 1];
        let mut on_core = vec![Vec::new(); hw.n_cores as usize];
        let mut prev = vec![None; n + 1];
        for st in &sg.subtasks {
            let c = m.core(st.id);
            core[st.id as usize] = c;
            wcet[st.id as usize] = costs[&st.id].wcet_cycles;
            prev[st.id as usize] = on_core[c as usize].last().copied();
            on_core[c as usize].push(st.id);
        }
        let mut inbound = vec![Vec::new(); n + 1];
        let mut local_consumers = vec![Vec::new(); n + 1];
        for e in sg.internal_edges() {
            inbound[e.dst as usize].push((e.src, e.bytes));
            if core[e.src as usize] == core[e.dst as usize] {
                local_consumers[e.src as usize].push(e.dst);
            }
        }
        let mut dram_in = vec![0u64; n + 1];
        let mut dram_out = vec![0u64; n + 1];
        for st in &sg.subtasks {
            dram_in[st.id as usize] = sg.dram_in(st.id);
            dram_out[st.id as usize] = sg.dram_out(st.id);
        }
        let by_layer = sg
            .layer_order
            .iter()
            .map(|l| {
                sg.subtasks
                    .iter()
                    .filter(|s| &s.layer_id == l)
                    .map(|s| s.id)
                    .collect()
            })
            .collect();
        Ctx {
            sg,
            hw,
            n,
            core,
            wcet,
            prev,
            inbound,
            local_consumers,
            dram_in,
            dram_out,
            by_layer,
            on_core,
        }
    }

    fn sequence(&self, plan: &Plan) -> Vec<(Job, u64)> {
        let nc = self.hw.n_cores as usize;
        let mut last = nc - 1;
        let mut seq = Vec::new();
        let empty = || vec![VecDeque::new(); nc];

        if self.hw.include_program_load {
            let mut q = empty();
            for (c, subs) in self.on_core.iter().enumerate() {
                if !subs.is_empty() {
                    q[c].push_back((Job::Program { core: c as u32 }, self.hw.program_image_bytes));
                }
            }
            interleave(q, &mut last, &mut seq);
        }

        for subs in &self.by_layer {
            let mut q = empty();
            for &j in subs {
                let c = self.core[j as usize] as usize;
                if self.dram_in[j as usize] > 0 {
                    q[c].push_back((Job::Load { dst: j }, self.dram_in[j as usize]));
                }
                for &(i, bytes) in &self.inbound[j as usize] {
                    if self.core[i as usize] as usize != c {
                        q[c].push_back((Job::Copy { src: i, dst: j }, bytes));
                    } else if plan.spilled[i as usize] {
                        q[c].push_back((Job::Reload { src: i, dst: j }, bytes));
                    }
                }
            }
            interleave(q, &mut last, &mut seq);

            let mut q = empty();
            for &i in subs {
                let c = self.core[i as usize] as usize;
                if plan.spilled[i as usize] {
                    let out = self.sg.subtasks[i as usize - 1].out_bytes;
                    q[c].push_back((Job::Spill { src: i }, out));
                }
                if self.dram_out[i as usize] > 0 {
                    q[c].push_back((Job::Store { src: i }, self.dram_out[i as usize]));
                }
            }
            interleave(q, &mut last, &mut seq);
        }
        seq
    }

    fn ensure_compute(&self, j: u32, plan: &Plan, tl: &mut Timeline) -> Result<(), ScheduleError> {
        let mut chain = Vec::new();
        let mut cur = Some(j);
        while let Some(c) = cur {
            if tl.cdone[c as usize] {
                break;
            }
            chain.push(c);
            cur = self.prev[c as usize];
        }
        for &c in chain.iter().rev() {
            let ci = c as usize;
            let mut s = 0u64;
            if let Some(p) = tl.program[self.core[ci] as usize] {
                if !tl.placed[p] {
                    return Err(ScheduleError::Inconsistent(
                        "program load not yet placed".into(),
                    ));
                }
                s = s.max(tl.end(p));
            }
            if let Some(p) = self.prev[ci] {
                s = s.max(tl.cstart[p as usize] + self.wcet[p as usize]);
            }
            for &x in &tl.serving[ci] {
                if !tl.placed[x] {
                    return Err(ScheduleError::Inconsistent(format!(
                        "subtask {c} evaluated before its inbound transfers"
                    )));
                }
                s = s.max(tl.end(x));
            }
            for &(i, _) in &self.inbound[ci] {
                if self.core[i as usize] == self.core[ci] && !plan.spilled[i as usize] {
                    if !tl.cdone[i as usize] {
                        return Err(ScheduleError::Inconsistent(format!(
                            "local producer {i} of {c} not yet evaluated"
                        )));
                    }
                    s = s.max(tl.cstart[i as usize] + self.wcet[i as usize]);
                }
            }
            tl.cstart[ci] = s;
            tl.cdone[ci] = true;
        }
        Ok(())
    }

    fn cend(&self, tl: &Timeline, j: u32) -> u64 {
        tl.cstart[j as usize] + self.wcet[j as usize]
    }

    /// Earliest cycle an inbound transfer of `j` may start.
    fn gate(&self, j: u32, plan: &Plan, tl: &mut Timeline) -> Result<u64, ScheduleError> {
        match self.prev[j as usize] {
            None => Ok(0),
            Some(p) => {
                self.ensure_compute(p, plan, tl)?;
                Ok(if plan.no_prefetch[j as usize] {
                    self.cend(tl, p)
                } else {
                    tl.cstart[p as usize]
                })
            }
        }
    }

    fn evaluate(&self, plan: &Plan) -> Result<Timeline, ScheduleError> {
        let jobs = self.sequence(plan);
        let n = self.n;
        let mut tl = Timeline {
            start: vec![0; jobs.len()],
            dur: vec![0; jobs.len()],
            placed: vec![false; jobs.len()],
            cstart: vec![0; n + 1],
            cdone: vec![false; n + 1],
            serving: vec![Vec::new(); n + 1],
            readers: vec![Vec::new(); n + 1],
            program: vec![None; self.hw.n_cores as usize],
            spill_job: vec![None; n + 1],
            jobs,
        };
        for (x, &(job, _)) in tl.jobs.iter().enumerate() {
            if let Some(j) = job.consumer() {
                tl.serving[j as usize].push(x);
            }
            if let Some(i) = job.reads_output_of() {
                tl.readers[i as usize].push(x);
            }
            match job {
                Job::Program { core } => tl.program[core as usize] = Some(x),
                Job::Spill { src } => tl.spill_job[src as usize] = Some(x),
                _ => {}
            }
        }

        let mut dma_free = 0u64;
        for x in 0..tl.jobs.len() {
            let (job, bytes) = tl.jobs[x];
            let ready = match job {
                Job::Program { .. } => 0,
                Job::Load { dst } => self.gate(dst, plan, &mut tl)?,
                Job::Copy { src, dst } => {
                    self.ensure_compute(src, plan, &mut tl)?;
                    self.cend(&tl, src).max(self.gate(dst, plan, &mut tl)?)
                }
                Job::Reload { src, dst } => {
                    let s = tl.spill_job[src as usize]
                        .filter(|&s| tl.placed[s])
                        .ok_or_else(|| {
                            ScheduleError::Inconsistent(format!(
                                "reload of {src} precedes its spill"
                            ))
                        })?;
                    tl.end(s).max(self.gate(dst, plan, &mut tl)?)
                }
                Job::Store { src } | Job::Spill { src } => {
                    self.ensure_compute(src, plan, &mut tl)?;
                    self.cend(&tl, src)
                }
            };
            let start = ready.max(dma_free);
            let dur = transfer_cycles(bytes, job.kind().route(), self.hw)?;
            tl.start[x] = start;
            tl.dur[x] = dur;
            tl.placed[x] = true;
            dma_free = start + dur;
        }
        for j in 1..=n as u32 {
            self.ensure_compute(j, plan, &mut tl)?;
        }
        Ok(tl)
    }

    /// Region requests per core.
    fn regions(&self, plan: &Plan, tl: &Timeline) -> Vec<Vec<RegionRequest>> {
        let mut out = vec![Vec::new(); self.hw.n_cores as usize];
        for st in &self.sg.subtasks {
            let j = st.id;
            let ji = j as usize;
            let c = self.core[ji] as usize;
            let cend = self.cend(tl, j);
            let tile_start = tl.serving[ji]
                .iter()
                .map(|&x| tl.start[x])
                .chain([tl.cstart[ji]])
                .min()
                .unwrap();
            out[c].push(RegionRequest {
                len: st.spm_footprint_bytes,
                start: tile_start,
                end: cend,
                owner: j,
                role: RegionRole::Tile,
            });
            let mut out_end = cend;
            if !plan.spilled[ji] {
                for &k in &self.local_consumers[ji] {
                    out_end = out_end.max(self.cend(tl, k));
                }
            }
            for &x in &tl.readers[ji] {
                out_end = out_end.max(tl.end(x));
            }
            if out_end > cend {
                out[c].push(RegionRequest {
                    len: st.out_bytes,
                    start: cend,
                    end: out_end,
                    owner: j,
                    role: RegionRole::Out,
                });
            }
        }
        out
    }

    /// Picks one plan change that may relieve pressure at `t` on a core.
    fn relieve(&self, plan: &mut Plan, tl: &Timeline, reqs: &[RegionRequest], t: u64) -> bool {
        let live = reqs.iter().filter(|r| r.start <= t && t < r.end);

        let prefetched = live
            .clone()
            .filter(|r| r.role == RegionRole::Tile && !plan.no_prefetch[r.owner as usize])
            .filter(|r| match self.prev[r.owner as usize] {
                Some(p) => r.start < self.cend(tl, p),
                None => false,
            })
            .max_by_key(|r| (tl.cstart[r.owner as usize], r.owner));
        if let Some(r) = prefetched {
            plan.no_prefetch[r.owner as usize] = true;
            return true;
        }

        let spillable = live
            .filter(|r| r.role == RegionRole::Out && !plan.spilled[r.owner as usize])
            .filter_map(|r| {
                let i = r.owner as usize;
                let consumers = &self.local_consumers[i];
                let running = consumers
                    .iter()
                    .any(|&k| tl.cstart[k as usize] <= t && t < self.cend(tl, k));
                let reading = tl.readers[i]
                    .iter()
                    .any(|&x| tl.start[x] <= t && t < tl.end(x));
                if running || reading {
                    return None;
                }
                let next_use = consumers
                    .iter()
                    .map(|&k| tl.cstart[k as usize])
                    .filter(|&s| s > t)
                    .min()?;
                Some((next_use, std::cmp::Reverse(r.owner)))
            })
            .max();
        if let Some((_, std::cmp::Reverse(i))) = spillable {
            plan.spilled[i as usize] = true;
            return true;
        }
        false
    }
}

fn check_inputs(
    sg: &SubtaskGraph,
    m: &Mapping,
    costs: &BTreeMap<u32, CostEstimate>,
    hw: &HardwareConfig,
) -> Result<(), ScheduleError> {
    let bad = |s: String| Err(ScheduleError::Inconsistent(s));
    hw.validate()?;
    sg.validate()
        .map_err(|e| ScheduleError::Inconsistent(e.to_string()))?;
    if m.n_cores != hw.n_cores {
        return bad(format!(
            "mapping targets {} cores, hardware has {}",
            m.n_cores, hw.n_cores
        ));
    }
    if m.core_of.len() != sg.subtasks.len() {
        return bad("mapping does not cover every subtask exactly once".into());
    }
    for st in &sg.subtasks {
        match m.core_of.get(&st.id) {
            Some(&c) if c < hw.n_cores => {}
            Some(&c) => return bad(format!("subtask {} mapped to missing core {c}", st.id)),
            None => return bad(format!("subtask {} is unmapped", st.id)),
        }
        match costs.get(&st.id) {
            Some(c) if c.wcet_cycles >= 1 => {}
            _ => return bad(format!("subtask {} lacks a positive wcet", st.id)),
        }
        if st.spm_footprint_bytes == 0 || st.out_bytes == 0 {
            return bad(format!("subtask {} has an empty buffer", st.id));
        }
    }
    Ok(())
}

/// Builds a static schedule. Scratchpad pressure is resolved first by
/// delaying prefetches, then by spilling outputs to DRAM; if neither helps
/// the build fails with [`ScheduleError::Overflow`].
pub fn build_schedule(
    sg: &SubtaskGraph,
    m: &Mapping,
    costs: &BTreeMap<u32, CostEstimate>,
    hw: &HardwareConfig,
) -> Result<Schedule, ScheduleError> {
    check_inputs(sg, m, costs, hw)?;
    let ctx = Ctx::new(sg, m, costs, hw);
    let mut plan = Plan {
        no_prefetch: vec![false; ctx.n + 1],
        spilled: vec![false; ctx.n + 1],
    };

    loop {
        let tl = ctx.evaluate(&plan)?;
        let reqs = ctx.regions(&plan, &tl);
        let mut offsets = Vec::with_capacity(reqs.len());
        let mut failure = None;
        for (c, r) in reqs.iter().enumerate() {
            match first_fit(r, hw.spm_data_bytes) {
                Ok(o) => offsets.push(o),
                Err(f) => {
                    failure = Some((c, f));
                    break;
                }
            }
        }
        match failure {
            None => return Ok(assemble(&ctx, sg, m, costs, &tl, &reqs, &offsets)),
            Some((c, f)) => {
                if !ctx.relieve(&mut plan, &tl, &reqs[c], f.cycle) {
                    return Err(ScheduleError::Overflow {
                        core: c as u32,
                        cycle: f.cycle,
                        deficit: f.deficit,
                    });
                }
            }
        }
    }
}

fn assemble(
    ctx: &Ctx,
    sg: &SubtaskGraph,
    m: &Mapping,
    costs: &BTreeMap<u32, CostEstimate>,
    tl: &Timeline,
    reqs: &[Vec<RegionRequest>],
    offsets: &[Vec<u64>],
) -> Schedule {
    let n = ctx.n;
    let mut tile_off = vec![0u64; n + 1];
    let mut out_off = vec![0u64; n + 1];
    let mut spm_regions = Vec::with_capacity(reqs.len());
    for (r, o) in reqs.iter().zip(offsets) {
        let mut regions: Vec<SpmRegion> = r
            .iter()
            .zip(o)
            .map(|(q, &offset)| {
                match q.role {
                    RegionRole::Tile => tile_off[q.owner as usize] = offset,
                    RegionRole::Out => out_off[q.owner as usize] = offset,
                }
                SpmRegion {
                    offset,
                    len: q.len,
                    start: q.start,
                    end: q.end,
                    owner: q.owner,
                    role: q.role,
                }
            })
            .collect();
        regions.sort_by_key(|g| (g.start, g.owner, g.role == RegionRole::Out));
        spm_regions.push(regions);
    }

    let mut dram_cursor = 0u64;
    let mut spill_addr = vec![0u64; n + 1];
    let mut fill = vec![0u64; n + 1];
    let mut transfers = Vec::with_capacity(tl.jobs.len());
    for (x, &(job, bytes)) in tl.jobs.iter().enumerate() {
        let mut dram = || {
            let e = Endpoint::Dram {
                addr: dram_cursor,
                len: bytes,
            };
            dram_cursor += bytes;
            e
        };
        let core_of = |j: u32| ctx.core[j as usize];
        let out_src = |i: u32| Endpoint::Spm {
            core: core_of(i),
            offset: out_off[i as usize],
            len: bytes,
        };
        let mut tile_dst = |j: u32| {
            let e = Endpoint::Spm {
                core: core_of(j),
                offset: tile_off[j as usize] + fill[j as usize],
                len: bytes,
            };
            fill[j as usize] += bytes;
            e
        };
        let (src, dst, serves, produced_by, after) = match job {
            Job::Program { core } => (
                dram(),
                Endpoint::Imem {
                    core,
                    offset: 0,
                    len: bytes,
                },
                ctx.on_core[core as usize].clone(),
                None,
                None,
            ),
            Job::Load { dst } => (dram(), tile_dst(dst), vec![dst], None, None),
            Job::Copy { src, dst } => (out_src(src), tile_dst(dst), vec![dst], Some(src), None),
            Job::Reload { src, dst } => {
                let spill = tl.spill_job[src as usize].expect("spill precedes reload");
                (
                    Endpoint::Dram {
                        addr: spill_addr[src as usize],
                        len: bytes,
                    },
                    tile_dst(dst),
                    vec![dst],
                    Some(src),
                    Some(spill as u32),
                )
            }
            Job::Spill { src } => {
                let d = dram();
                if let Endpoint::Dram { addr, .. } = d {
                    spill_addr[src as usize] = addr;
                }
                (out_src(src), d, vec![src], Some(src), None)
            }
            Job::Store { src } => (out_src(src), dram(), vec![src], Some(src), None),
        };
        transfers.push(TransferEvent {
            id: x as u32,
            kind: job.kind(),
            src,
            dst,
            bytes,
            start: tl.start[x],
            dur: tl.dur[x],
            serves,
            produced_by,
            after,
        });
    }
    transfers.sort_by_key(|t| (t.start, t.id));

    let mut computes: Vec<ComputeEvent> = sg
        .subtasks
        .iter()
        .map(|st| ComputeEvent {
            subtask: st.id,
            core: ctx.core[st.id as usize],
            start: tl.cstart[st.id as usize],
            wcet: ctx.wcet[st.id as usize],
            basis: costs[&st.id].derived_from.clone(),
        })
        .collect();
    computes.sort_by_key(|c| (c.start, c.subtask));

    let mut s = Schedule {
        hw: ctx.hw.clone(),
        mapping: m.clone(),
        transfers,
        computes,
        spm_regions,
        graph: sg.clone(),
        makespan: 0,
    };
    s.makespan = s.recompute_makespan();
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{Edge, Subtask, Tile, TileKind};
    use crate::schedule::check::run_checks;
    use crate::timing::CostBasis;

    fn graph(n: u32, layers: &[u32], edges: &[(u32, u32, u64)], fp: u64, out: u64) -> SubtaskGraph {
        SubtaskGraph {
            subtasks: (1..=n)
                .map(|id| Subtask {
                    id,
                    layer_id: format!("l{}", layers[id as usize - 1]),
                    kind: TileKind::Gemm,
                    k: 1,
                    tile: Tile {
                        m0: 0,
                        mt: 1,
                        n0: 0,
                        nt: 1,
                    },
                    dram_in_bytes: 0,
                    spm_footprint_bytes: fp,
                    out_bytes: out,
                })
                .collect(),
            edges: edges
                .iter()
                .map(|&(src, dst, bytes)| Edge { src, dst, bytes })
                .collect(),
            layer_order: {
                let mut l: Vec<u32> = layers.to_vec();
                l.dedup();
                l.into_iter().map(|x| format!("l{x}")).collect()
            },
        }
    }

    fn costs(w: &[u64]) -> BTreeMap<u32, CostEstimate> {
        w.iter()
            .enumerate()
            .map(|(i, &c)| {
                (
                    i as u32 + 1,
                    CostEstimate {
                        wcet_cycles: c,
                        derived_from: CostBasis::Override { analytic_cycles: c },
                    },
                )
            })
            .collect()
    }

    fn mapping(cores: &[u32], n_cores: u32) -> Mapping {
        Mapping {
            n_cores,
            core_of: cores
                .iter()
                .enumerate()
                .map(|(i, &c)| (i as u32 + 1, c))
                .collect(),
            load_cap: cores.len() as u32,
        }
    }

    fn hw(n_cores: u32) -> HardwareConfig {
        HardwareConfig {
            n_cores,
            ..HardwareConfig::default()
        }
    }

    #[test]
    fn two_subtask_chain_hand_timeline() {
        let sg = graph(
            2,
            &[1, 2],
            &[(0, 1, 100), (0, 2, 800), (1, 2, 64), (2, 0, 128)],
            1024,
            128,
        );
        let hw = hw(1);
        let s = build_schedule(&sg, &mapping(&[0, 0], 1), &costs(&[1000, 2000]), &hw).unwrap();
        let spans: Vec<(u64, u64)> = s.transfers.iter().map(|t| (t.start, t.end())).collect();
        assert_eq!(spans, vec![(0, 63), (63, 213), (3063, 3129)]);
        assert_eq!(
            (s.compute(1).unwrap().start, s.compute(1).unwrap().end()),
            (63, 1063)
        );
        assert_eq!(
            (s.compute(2).unwrap().start, s.compute(2).unwrap().end()),
            (1063, 3063)
        );
        assert_eq!(s.makespan, 3129);
        assert!(run_checks(&s).iter().all(|c| c.ok), "{:?}", run_checks(&s));
    }

    #[test]
    fn same_layer_loads_round_robin_over_cores() {
        let sg = graph(3, &[1, 1, 1], &[(0, 1, 8), (0, 2, 8), (0, 3, 8)], 64, 8);
        let s = build_schedule(
            &sg,
            &mapping(&[2, 0, 1], 3),
            &costs(&[100, 100, 100]),
            &hw(3),
        )
        .unwrap();
        let order: Vec<u32> = s.transfers.iter().map(|t| t.dst.core().unwrap()).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn empty_graph_empty_schedule() {
        let sg = graph(0, &[], &[], 1, 1);
        let s = build_schedule(&sg, &mapping(&[], 2), &costs(&[]), &hw(2)).unwrap();
        assert_eq!(s.makespan, 0);
        assert!(s.transfers.is_empty() && s.computes.is_empty());
        assert_eq!(s.spm_regions.len(), 2);
    }

    #[test]
    fn single_subtask_region_at_offset_zero() {
        let sg = graph(1, &[1], &[(0, 1, 200), (1, 0, 16)], 300, 16);
        let s = build_schedule(&sg, &mapping(&[0], 1), &costs(&[500]), &hw(1)).unwrap();
        let tile = s.spm_regions[0]
            .iter()
            .find(|r| r.role == RegionRole::Tile)
            .unwrap();
        assert_eq!(tile.offset, 0);
        assert_eq!(tile.len, 300);
    }

    #[test]
    fn program_loads_precede_compute() {
        let sg = graph(2, &[1, 1], &[(0, 1, 8), (0, 2, 8)], 64, 8);
        let hw = HardwareConfig {
            include_program_load: true,
            ..hw(4)
        };
        let s = build_schedule(&sg, &mapping(&[0, 1], 4), &costs(&[100, 100]), &hw).unwrap();
        let progs: Vec<&TransferEvent> =
            s.transfers.iter().filter(|t| t.is_program_load()).collect();
        assert_eq!(progs.len(), 2);
        for c in &s.computes {
            let p = progs.iter().find(|p| p.dst.core() == Some(c.core)).unwrap();
            assert!(p.end() <= c.start);
        }
        assert!(run_checks(&s).iter().all(|c| c.ok));
    }

    #[test]
    fn pressure_resolved_by_spilling() {
        // A's output must survive B's tile to reach C; both cannot coexist.
        let mut sg = graph(
            3,
            &[1, 2, 3],
            &[
                (0, 1, 8),
                (0, 2, 8),
                (0, 3, 8),
                (1, 3, 400),
                (2, 0, 8),
                (3, 0, 8),
            ],
            0,
            0,
        );
        let fp = [100, 700, 500];
        let out = [400, 8, 8];
        for (i, st) in sg.subtasks.iter_mut().enumerate() {
            st.spm_footprint_bytes = fp[i];
            st.out_bytes = out[i];
        }
        let hw = HardwareConfig {
            spm_data_bytes: 1000,
            ..hw(1)
        };
        let s =
            build_schedule(&sg, &mapping(&[0, 0, 0], 1), &costs(&[300, 300, 300]), &hw).unwrap();
        let reload = s
            .transfers
            .iter()
            .find(|t| t.after.is_some())
            .expect("a reload");
        assert_eq!(reload.produced_by, Some(1));
        assert_eq!(reload.serves, vec![3]);
        let spill = s.transfer(reload.after.unwrap()).unwrap();
        assert_eq!(spill.kind, TransferKind::StoreDram);
        assert!(spill.end() <= reload.start);
        assert!(run_checks(&s).iter().all(|c| c.ok), "{:?}", run_checks(&s));
    }

    fn two_gemm_tiles(spm: u64) -> Schedule {
        // m=64, n=32, k=144: footprint 9216 + 4608 + 8192 = 22016 B, output 2048 B.
        let mut sg = graph(
            2,
            &[1, 2],
            &[
                (0, 1, 9216 + 4608),
                (0, 2, 4608),
                (1, 2, 2048),
                (2, 0, 2048),
            ],
            22016,
            2048,
        );
        for st in &mut sg.subtasks {
            st.k = 144;
            st.tile = Tile {
                m0: 0,
                mt: 64,
                n0: 0,
                nt: 32,
            };
        }
        let hw = HardwareConfig {
            spm_data_bytes: spm,
            ..hw(1)
        };
        build_schedule(&sg, &mapping(&[0, 0], 1), &costs(&[18632, 18632]), &hw).unwrap()
    }

    #[test]
    fn two_full_tiles_fit_without_spill() {
        let s = two_gemm_tiles(262144);
        assert!(s.transfers.iter().all(|t| t.after.is_none()));
        assert!(run_checks(&s).iter().all(|c| c.ok));
    }

    #[test]
    fn tight_scratchpad_inserts_one_spill_pair() {
        let s = two_gemm_tiles(24000);
        let reloads: Vec<&TransferEvent> =
            s.transfers.iter().filter(|t| t.after.is_some()).collect();
        assert_eq!(reloads.len(), 1);
        let spills = s
            .transfers
            .iter()
            .filter(|t| t.kind == TransferKind::StoreDram && t.produced_by == Some(1))
            .count();
        assert_eq!(spills, 1);
        assert!(run_checks(&s).iter().all(|c| c.ok), "{:?}", run_checks(&s));
    }

    #[test]
    fn ample_memory_needs_no_spill() {
        let sg = graph(
            3,
            &[1, 2, 3],
            &[
                (0, 1, 8),
                (0, 2, 8),
                (0, 3, 8),
                (1, 3, 400),
                (2, 0, 8),
                (3, 0, 8),
            ],
            700,
            400,
        );
        let s = build_schedule(
            &sg,
            &mapping(&[0, 0, 0], 1),
            &costs(&[300, 300, 300]),
            &hw(1),
        )
        .unwrap();
        assert!(s.transfers.iter().all(|t| t.after.is_none()));
    }

    #[test]
    fn oversized_tile_overflows() {
        let sg = graph(1, &[1], &[(0, 1, 8)], 2000, 8);
        let hw = HardwareConfig {
            spm_data_bytes: 1000,
            ..hw(1)
        };
        let err = build_schedule(&sg, &mapping(&[0], 1), &costs(&[10]), &hw).unwrap_err();
        assert!(matches!(
            err,
            ScheduleError::Overflow {
                core: 0,
                deficit: 1000,
                ..
            }
        ));
    }

    #[test]
    fn rejects_incomplete_mapping() {
        let sg = graph(2, &[1, 2], &[(1, 2, 8)], 8, 8);
        let err = build_schedule(&sg, &mapping(&[0], 1), &costs(&[1, 1]), &hw(1)).unwrap_err();
        assert!(matches!(err, ScheduleError::Inconsistent(_)));
    }
}
