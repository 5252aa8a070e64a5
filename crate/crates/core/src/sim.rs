//! Discrete-event replay of a schedule under actual execution times.
//!
//! Every event fires at its scheduled start cycle regardless of what happened
//! before it; the checker records whatever guarantee that breaks.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::check::{derive_deps, validate_structure};
use crate::schedule::{RegionRole, Schedule};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("malformed schedule: {0}")]
    Malformed(String),
    #[error("bad profile {0:?}: {1}")]
    Profile(String, String),
    #[error("writing {path}: {detail}")]
    Output { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExecutionProfile {
    WorstCase,
    /// Every subtask runs for `factor * wcet`, factor in (0, 1].
    Scaled(f64),
    /// Factors drawn uniformly from `[min, 1]`, one per subtask in id order.
    Random {
        seed: u64,
        min: f64,
    },
    /// Listed subtasks run for `factor * wcet` with factor > 1; others at wcet.
    Fault(BTreeMap<u32, f64>),
}

impl ExecutionProfile {
    pub fn is_worst_case(&self) -> bool {
        matches!(self, ExecutionProfile::WorstCase)
    }

    fn factors(&self, ids: &[u32]) -> BTreeMap<u32, f64> {
        match self {
            ExecutionProfile::WorstCase => ids.iter().map(|&i| (i, 1.0)).collect(),
            ExecutionProfile::Scaled(f) => ids.iter().map(|&i| (i, *f)).collect(),
            ExecutionProfile::Random { seed, min } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                ids.iter()
                    .map(|&i| (i, rng.gen_range(*min..=1.0)))
                    .collect()
            }
            ExecutionProfile::Fault(m) => ids
                .iter()
                .map(|&i| (i, m.get(&i).copied().unwrap_or(1.0)))
                .collect(),
        }
    }
}

impl fmt::Display for ExecutionProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutionProfile::WorstCase => write!(f, "worst-case"),
            ExecutionProfile::Scaled(x) => write!(f, "scaled:{x}"),
            ExecutionProfile::Random { seed, min } => write!(f, "random:{seed}:{min}"),
            ExecutionProfile::Fault(m) => {
                let parts: Vec<String> = m.iter().map(|(k, v)| format!("S{k}={v}")).collect();
                write!(f, "fault:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for ExecutionProfile {
    type Err = SimError;

    /// `worst-case`, `scaled:F`, `random:SEED:MIN`, `fault:ID=F,...`
    /// (ids may carry an `S` prefix).
    fn from_str(s: &str) -> Result<Self, SimError> {
        let err = |m: &str| SimError::Profile(s.to_string(), m.to_string());
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| err("expected a number"))
        };
        let (mode, rest) = s.split_once(':').unwrap_or((s, ""));
        match mode.trim() {
            "worst-case" | "worst_case" if rest.is_empty() => Ok(ExecutionProfile::WorstCase),
            "scaled" => {
                let f = num(rest)?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(err("scale factor must lie in (0, 1]"));
                }
                Ok(ExecutionProfile::Scaled(f))
            }
            "random" => {
                let (seed, min) = rest
                    .split_once(':')
                    .ok_or_else(|| err("expected SEED:MIN"))?;
                let seed = seed
                    .trim()
                    .parse()
                    .map_err(|_| err("seed must be an integer"))?;
                let min = num(min)?;
                if !(min > 0.0 && min <= 1.0) {
                    return Err(err("minimum factor must lie in (0, 1]"));
                }
                Ok(ExecutionProfile::Random { seed, min })
            }
            "fault" => {
                let mut m = BTreeMap::new();
                for part in rest.split(',').filter(|p| !p.trim().is_empty()) {
                    let (id, f) = part.split_once('=').ok_or_else(|| err("expected ID=F"))?;
                    let id = id.trim();
                    let id = id.strip_prefix(['S', 's']).unwrap_or(id);
                    let id: u32 = id.parse().map_err(|_| err("bad subtask id"))?;
                    let f = num(f)?;
                    if !(f > 1.0 && f.is_finite()) {
                        return Err(err("fault factor must exceed 1"));
                    }
                    m.insert(id, f);
                }
                if m.is_empty() {
                    return Err(err("fault profile names no subtask"));
                }
                Ok(ExecutionProfile::Fault(m))
            }
            _ => Err(err("unknown mode")),
        }
    }
}

/// `ceil(factor * wcet)`, at least one cycle. Products within floating-point
/// noise of an integer round to it.
pub fn actual_cycles(wcet: u64, factor: f64) -> u64 {
    let x = factor * wcet as f64;
    let r = x.round();
    let c = if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (c as u64).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    WcetOverrun,
    DependencyUnready,
    DmaOverlap,
    SpmOverflow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// `S<id>` for computes, `T<id>` for transfers.
    pub event: String,
    pub cycle: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub event: String,
    /// `core` or `dma`.
    pub resource: String,
    pub row: u32,
    pub scheduled_start: u64,
    pub scheduled_end: u64,
    pub actual_start: u64,
    pub actual_end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTrace {
    pub profile: String,
    pub events: Vec<TraceEvent>,
    pub violations: Vec<Violation>,
    pub observed_makespan: u64,
    pub predicted_makespan: u64,
}

impl SimTrace {
    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| SimError::Output {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Rows `row_type,row_id,label,start,end` over actual intervals.
    pub fn gantt_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row_type", "row_id", "label", "start", "end"])
            .expect("in-memory csv");
        for e in &self.events {
            w.write_record([
                e.resource.clone(),
                e.row.to_string(),
                e.event.clone(),
                e.actual_start.to_string(),
                e.actual_end.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn write_gantt(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let path = path.as_ref();
        std::fs::write(path, self.gantt_csv()).map_err(|e| SimError::Output {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// Event kinds in the order they are processed within one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    TransferEnd(u32),
    ComputeEnd(u32),
    RegionFree(usize, usize),
    TransferStart(u32),
    RegionAlloc(usize, usize),
    ComputeStart(u32),
}

fn rank(e: &Ev) -> u8 {
    match e {
        Ev::TransferEnd(_) => 0,
        Ev::ComputeEnd(_) => 1,
        Ev::RegionFree(..) => 2,
        Ev::TransferStart(_) => 3,
        Ev::RegionAlloc(..) => 4,
        Ev::ComputeStart(_) => 5,
    }
}

pub fn simulate(s: &Schedule, profile: &ExecutionProfile) -> Result<SimTrace, SimError> {
    validate_structure(s).map_err(SimError::Malformed)?;
    let deps = derive_deps(s);
    let ids: Vec<u32> = s.graph.subtasks.iter().map(|st| st.id).collect();
    let factors = profile.factors(&ids);

    let actual: BTreeMap<u32, u64> = s
        .computes
        .iter()
        .map(|c| (c.subtask, actual_cycles(c.wcet, factors[&c.subtask])))
        .collect();
    let compute_of: BTreeMap<u32, usize> = s
        .computes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.subtask, i))
        .collect();
    let transfer_of: BTreeMap<u32, usize> = s
        .transfers
        .iter()
        .enumerate()
        .map(|(i, t)| (t.id, i))
        .collect();

    let mut heap = BinaryHeap::new();
    let mut push = |cycle: u64, ev: Ev| heap.push(Reverse((cycle, rank(&ev), ev)));
    for t in &s.transfers {
        push(t.start, Ev::TransferStart(t.id));
        push(t.end(), Ev::TransferEnd(t.id));
    }
    for c in &s.computes {
        push(c.start, Ev::ComputeStart(c.subtask));
        push(c.start + actual[&c.subtask], Ev::ComputeEnd(c.subtask));
    }
    // A tile stays resident while its compute actually runs.
    for (core, regions) in s.spm_regions.iter().enumerate() {
        for (r, reg) in regions.iter().enumerate() {
            let mut end = reg.end;
            if reg.role == RegionRole::Tile {
                if let Some(&ci) = compute_of.get(&reg.owner) {
                    end = end.max(s.computes[ci].start + actual[&reg.owner]);
                }
            }
            push(reg.start, Ev::RegionAlloc(core, r));
            push(end, Ev::RegionFree(core, r));
        }
    }

    let mut violations = Vec::new();
    let mut transfer_done = vec![false; s.transfers.len()];
    let mut compute_done = vec![false; s.computes.len()];
    let mut core_busy: Vec<Option<u32>> = vec![None; s.hw.n_cores as usize];
    let mut dma_active: Vec<u32> = Vec::new();
    let mut live: Vec<Vec<usize>> = vec![Vec::new(); s.spm_regions.len()];
    let cap = s.hw.spm_data_bytes;

    while let Some(Reverse((now, _, ev))) = heap.pop() {
        match ev {
            Ev::TransferStart(id) => {
                let t = &s.transfers[transfer_of[&id]];
                for &other in &dma_active {
                    violations.push(Violation {
                        kind: ViolationKind::DmaOverlap,
                        event: format!("T{id}"),
                        cycle: now,
                        detail: format!("starts while T{other} is in flight"),
                    });
                }
                if let Some(p) = t.produced_by {
                    if !compute_done[compute_of[&p]] {
                        violations.push(Violation {
                            kind: ViolationKind::DependencyUnready,
                            event: format!("T{id}"),
                            cycle: now,
                            detail: format!("output of S{p} not ready"),
                        });
                    }
                }
                if let Some(a) = t.after {
                    if !transfer_done[transfer_of[&a]] {
                        violations.push(Violation {
                            kind: ViolationKind::DependencyUnready,
                            event: format!("T{id}"),
                            cycle: now,
                            detail: format!("T{a} not complete"),
                        });
                    }
                }
                dma_active.push(id);
            }
            Ev::TransferEnd(id) => {
                transfer_done[transfer_of[&id]] = true;
                dma_active.retain(|&x| x != id);
            }
            Ev::ComputeStart(j) => {
                let c = &s.computes[compute_of[&j]];
                let mut missing: Vec<String> = deps.compute_transfers[&j]
                    .iter()
                    .filter(|id| !transfer_done[transfer_of[id]])
                    .map(|id| format!("T{id}"))
                    .collect();
                missing.extend(
                    deps.compute_locals[&j]
                        .iter()
                        .filter(|p| !compute_done[compute_of[p]])
                        .map(|p| format!("S{p}")),
                );
                missing.extend(
                    deps.undelivered
                        .iter()
                        .filter(|(_, d)| *d == j)
                        .map(|(p, _)| format!("S{p} (never delivered)")),
                );
                if let Some(b) = core_busy[c.core as usize] {
                    missing.push(format!("core {} still running S{b}", c.core));
                }
                if !missing.is_empty() {
                    violations.push(Violation {
                        kind: ViolationKind::DependencyUnready,
                        event: format!("S{j}"),
                        cycle: now,
                        detail: format!("waiting on {}", missing.join(", ")),
                    });
                }
                let act = actual[&j];
                if act > c.wcet {
                    violations.push(Violation {
                        kind: ViolationKind::WcetOverrun,
                        event: format!("S{j}"),
                        cycle: now + c.wcet,
                        detail: format!("ran {act} cycles against a bound of {}", c.wcet),
                    });
                }
                core_busy[c.core as usize] = Some(j);
            }
            Ev::ComputeEnd(j) => {
                let ci = compute_of[&j];
                compute_done[ci] = true;
                let core = s.computes[ci].core as usize;
                if core_busy[core] == Some(j) {
                    core_busy[core] = None;
                }
            }
            Ev::RegionAlloc(core, r) => {
                let reg = &s.spm_regions[core][r];
                let clash: Vec<u32> = live[core]
                    .iter()
                    .map(|&o| &s.spm_regions[core][o])
                    .filter(|o| o.offset < reg.offset + reg.len && reg.offset < o.offset + o.len)
                    .map(|o| o.owner)
                    .collect();
                live[core].push(r);
                let resident: u64 = live[core].iter().map(|&o| s.spm_regions[core][o].len).sum();
                if reg.offset + reg.len > cap || resident > cap || !clash.is_empty() {
                    violations.push(Violation {
                        kind: ViolationKind::SpmOverflow,
                        event: format!("S{}", reg.owner),
                        cycle: now,
                        detail: format!(
                            "core {core}: {resident} bytes resident of {cap}, overlapping {clash:?}"
                        ),
                    });
                }
            }
            Ev::RegionFree(core, r) => live[core].retain(|&o| o != r),
        }
    }

    violations.sort_by(|a, b| (a.cycle, a.kind, &a.event).cmp(&(b.cycle, b.kind, &b.event)));

    let mut events: Vec<TraceEvent> = s
        .transfers
        .iter()
        .map(|t| TraceEvent {
            event: format!("T{}", t.id),
            resource: "dma".into(),
            row: 0,
            scheduled_start: t.start,
            scheduled_end: t.end(),
            actual_start: t.start,
            actual_end: t.end(),
        })
        .chain(s.computes.iter().map(|c| TraceEvent {
            event: format!("S{}", c.subtask),
            resource: "core".into(),
            row: c.core,
            scheduled_start: c.start,
            scheduled_end: c.end(),
            actual_start: c.start,
            actual_end: c.start + actual[&c.subtask],
        }))
        .collect();
    events.sort_by(|a, b| {
        (a.actual_start, &a.resource, a.row, &a.event).cmp(&(
            b.actual_start,
            &b.resource,
            b.row,
            &b.event,
        ))
    });
    let observed = events.iter().map(|e| e.actual_end).max().unwrap_or(0);

    Ok(SimTrace {
        profile: profile.to_string(),
        events,
        violations,
        observed_makespan: observed,
        predicted_makespan: s.makespan,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub observed_makespan: u64,
    pub predicted_makespan: u64,
    pub equality_required: bool,
    pub violations: usize,
    pub reasons: Vec<String>,
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rel = match self.observed_makespan.cmp(&self.predicted_makespan) {
            std::cmp::Ordering::Less => "<",
            std::cmp::Ordering::Equal => "==",
            std::cmp::Ordering::Greater => ">",
        };
        write!(
            f,
            "{}: observed {} {rel} predicted {} ({} violations)",
            if self.pass { "PASS" } else { "FAIL" },
            self.observed_makespan,
            self.predicted_makespan,
            self.violations
        )
    }
}

pub fn verify_against_prediction(
    t: &SimTrace,
    s: &Schedule,
    profile: &ExecutionProfile,
) -> VerifyReport {
    let mut reasons: Vec<String> = t
        .violations
        .iter()
        .map(|v| format!("{:?} at {} on {}: {}", v.kind, v.cycle, v.event, v.detail))
        .collect();
    if t.observed_makespan > s.makespan {
        reasons.push(format!(
            "observed makespan {} exceeds prediction {}",
            t.observed_makespan, s.makespan
        ));
    }
    let eq = profile.is_worst_case();
    if eq && t.observed_makespan != s.makespan {
        reasons.push(format!(
            "worst-case run ended at {}, prediction is {}",
            t.observed_makespan, s.makespan
        ));
    }
    VerifyReport {
        pass: reasons.is_empty(),
        observed_makespan: t.observed_makespan,
        predicted_makespan: s.makespan,
        equality_required: eq,
        violations: t.violations.len(),
        reasons,
    }
}
