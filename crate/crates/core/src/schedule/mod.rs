//! Static time-triggered schedules: compute start times per core, a single
//! serialized DMA timeline, and scratchpad region allocation.

mod alloc;
mod artifact;
mod build;
pub mod check;
#[cfg(test)]
pub(crate) mod fixtures;

pub use alloc::{first_fit, AllocFailure, RegionRequest};
pub use artifact::{emit_schedule, load_schedule};
pub use build::build_schedule;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapping::Mapping;
use crate::partition::SubtaskGraph;
use crate::timing::{CostBasis, HardwareConfig, Route, TimingError};

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("scratchpad overflow on core {core} at cycle {cycle}: {deficit} bytes short")]
    Overflow { core: u32, cycle: u64, deficit: u64 },
    #[error("inconsistent scheduler inputs: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error("schedule artifact: {0}")]
    Artifact(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    LoadDram,
    StoreDram,
    CopySpm,
}

impl TransferKind {
    pub fn route(self) -> Route {
        match self {
            TransferKind::CopySpm => Route::SpmToSpm,
            TransferKind::LoadDram | TransferKind::StoreDram => Route::Dram,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Dram {
        addr: u64,
        len: u64,
    },
    Spm {
        core: u32,
        offset: u64,
        len: u64,
    },
    /// Instruction scratchpad.
    Imem {
        core: u32,
        offset: u64,
        len: u64,
    },
}

impl Endpoint {
    pub fn core(&self) -> Option<u32> {
        match *self {
            Endpoint::Dram { .. } => None,
            Endpoint::Spm { core, .. } | Endpoint::Imem { core, .. } => Some(core),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub id: u32,
    pub kind: TransferKind,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub bytes: u64,
    pub start: u64,
    pub dur: u64,
    /// Consuming subtask for loads and copies, producing subtask for stores.
    pub serves: Vec<u32>,
    /// Subtask whose output this transfer reads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub produced_by: Option<u32>,
    /// Transfer that must complete first (reload after spill store).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<u32>,
}

impl TransferEvent {
    pub fn end(&self) -> u64 {
        self.start + self.dur
    }

    pub fn is_program_load(&self) -> bool {
        matches!(self.dst, Endpoint::Imem { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeEvent {
    pub subtask: u32,
    pub core: u32,
    pub start: u64,
    pub wcet: u64,
    pub basis: CostBasis,
}

impl ComputeEvent {
    pub fn end(&self) -> u64 {
        self.start + self.wcet
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionRole {
    /// Working set of a tile: staged inputs, im2col expansion, weights, accumulators.
    Tile,
    /// Requantized output waiting for its readers.
    Out,
}

/// A scratchpad byte range live over `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpmRegion {
    pub offset: u64,
    pub len: u64,
    pub start: u64,
    pub end: u64,
    pub owner: u32,
    pub role: RegionRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub hw: HardwareConfig,
    pub mapping: Mapping,
    pub transfers: Vec<TransferEvent>,
    pub computes: Vec<ComputeEvent>,
    /// Indexed by core.
    pub spm_regions: Vec<Vec<SpmRegion>>,
    pub graph: SubtaskGraph,
    pub makespan: u64,
}

impl Schedule {
    pub fn compute(&self, subtask: u32) -> Option<&ComputeEvent> {
        self.computes.iter().find(|c| c.subtask == subtask)
    }

    pub fn transfer(&self, id: u32) -> Option<&TransferEvent> {
        self.transfers.iter().find(|t| t.id == id)
    }

    /// Latest end over all events; 0 for an empty schedule.
    pub fn recompute_makespan(&self) -> u64 {
        let t = self.transfers.iter().map(|t| t.end());
        let c = self.computes.iter().map(|c| c.end());
        t.chain(c).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("schedule serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        serde_json::from_str(text).map_err(|e| ScheduleError::Artifact(e.to_string()))
    }
}
