//! Hardware parameters and the analytic worst-case cost model.
//!
//! Compute estimates stand in for an external WCET analysis: each tile gets a
//! closed-form cycle bound, and [`WcetOverrides`] can replace any of them with
//! an externally analyzed value. Transfer bounds cover DMA setup, DRAM access
//! latency and bus occupancy. All components share one clock.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::partition::{Subtask, SubtaskGraph, TileKind};

#[derive(Debug, Error)]
pub enum TimingError {
    #[error("invalid hardware config: {0}")]
    InvalidConfig(String),
    #[error("transfer of zero bytes")]
    ZeroBytes,
    #[error("wcet override for subtask {0} must be at least 1 cycle")]
    ZeroOverride(u32),
    #[error("wcet override names unknown subtask {0}")]
    UnknownSubtask(u32),
    #[error("wcet override file {path}: {detail}")]
    OverrideFile { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    pub n_cores: u32,
    pub spm_data_bytes: u64,
    pub spm_instr_bytes: u64,
    pub vlen_bits: u32,
    pub sew_bits: u32,
    pub bus_bytes_per_cycle: u64,
    pub dma_setup_cycles: u64,
    pub dram_latency_cycles: u64,
    pub gemm_c0: u64,
    pub gemm_c1: u64,
    pub stream_c1: u64,
    pub program_image_bytes: u64,
    pub include_program_load: bool,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            n_cores: 16,
            spm_data_bytes: 512 * 1024,
            spm_instr_bytes: 512 * 1024,
            vlen_bits: 512,
            sew_bits: 8,
            bus_bytes_per_cycle: 8,
            dma_setup_cycles: 20,
            dram_latency_cycles: 30,
            gemm_c0: 200,
            gemm_c1: 2,
            stream_c1: 1,
            program_image_bytes: 64 * 1024,
            include_program_load: false,
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<(), TimingError> {
        let fields: [(&str, u64); 12] = [
            ("n_cores", self.n_cores as u64),
            ("spm_data_bytes", self.spm_data_bytes),
            ("spm_instr_bytes", self.spm_instr_bytes),
            ("vlen_bits", self.vlen_bits as u64),
            ("sew_bits", self.sew_bits as u64),
            ("bus_bytes_per_cycle", self.bus_bytes_per_cycle),
            ("dma_setup_cycles", self.dma_setup_cycles),
            ("dram_latency_cycles", self.dram_latency_cycles),
            ("gemm_c0", self.gemm_c0),
            ("gemm_c1", self.gemm_c1),
            ("stream_c1", self.stream_c1),
            ("program_image_bytes", self.program_image_bytes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(TimingError::InvalidConfig(format!(
                "{name} must be positive"
            )));
        }
        if !self.vlen_bits.is_multiple_of(self.sew_bits) {
            return Err(TimingError::InvalidConfig(format!(
                "vlen_bits {} not divisible by sew_bits {}",
                self.vlen_bits, self.sew_bits
            )));
        }
        if self.program_image_bytes > self.spm_instr_bytes {
            return Err(TimingError::InvalidConfig(format!(
                "program image of {} bytes exceeds instruction scratchpad of {}",
                self.program_image_bytes, self.spm_instr_bytes
            )));
        }
        Ok(())
    }

    /// Vector lanes per register at the configured element width.
    pub fn lanes(&self) -> u64 {
        (self.vlen_bits / self.sew_bits) as u64
    }

    /// Per-tile scratchpad budget: half the data scratchpad, the other half
    /// holds the next tile's inputs.
    pub fn tile_budget_bytes(&self) -> u64 {
        self.spm_data_bytes / 2
    }

    pub fn from_json(text: &str) -> Result<Self, TimingError> {
        let hw: HardwareConfig =
            serde_json::from_str(text).map_err(|e| TimingError::InvalidConfig(e.to_string()))?;
        hw.validate()?;
        Ok(hw)
    }
}

/// Which path a transfer takes through the interconnect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// DRAM to scratchpad or back; pays the DRAM access latency.
    Dram,
    /// Scratchpad to scratchpad through the crossbar.
    SpmToSpm,
}

pub fn transfer_cycles(bytes: u64, route: Route, hw: &HardwareConfig) -> Result<u64, TimingError> {
    if bytes == 0 {
        return Err(TimingError::ZeroBytes);
    }
    let latency = match route {
        Route::Dram => hw.dram_latency_cycles,
        Route::SpmToSpm => 0,
    };
    Ok(hw.dma_setup_cycles + latency + bytes.div_ceil(hw.bus_bytes_per_cycle))
}

/// Inputs of the formula that produced an estimate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum CostBasis {
    Gemm {
        mt: u64,
        nt: u64,
        k: u64,
        lanes: u64,
        c0: u64,
        c1: u64,
    },
    Stream {
        mt: u64,
        nt: u64,
        lanes: u64,
        c0: u64,
        c1: u64,
    },
    Override {
        analytic_cycles: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub wcet_cycles: u64,
    pub derived_from: CostBasis,
}

/// `c0 + mt * k * ceil(nt / lanes) * c1`
pub fn gemm_tile_wcet(mt: u64, nt: u64, k: u64, hw: &HardwareConfig) -> u64 {
    hw.gemm_c0 + mt * k * nt.div_ceil(hw.lanes()) * hw.gemm_c1
}

/// `c0 + mt * ceil(nt / lanes) * stream_c1`
pub fn stream_tile_wcet(mt: u64, nt: u64, hw: &HardwareConfig) -> u64 {
    hw.gemm_c0 + mt * nt.div_ceil(hw.lanes()) * hw.stream_c1
}

pub fn wcet_subtask(st: &Subtask, hw: &HardwareConfig) -> CostEstimate {
    let (mt, nt) = (st.tile.mt, st.tile.nt);
    match st.kind {
        TileKind::Gemm => CostEstimate {
            wcet_cycles: gemm_tile_wcet(mt, nt, st.k, hw),
            derived_from: CostBasis::Gemm {
                mt,
                nt,
                k: st.k,
                lanes: hw.lanes(),
                c0: hw.gemm_c0,
                c1: hw.gemm_c1,
            },
        },
        TileKind::Stream { .. } => CostEstimate {
            wcet_cycles: stream_tile_wcet(mt, nt, hw),
            derived_from: CostBasis::Stream {
                mt,
                nt,
                lanes: hw.lanes(),
                c0: hw.gemm_c0,
                c1: hw.stream_c1,
            },
        },
    }
}

/// Externally supplied WCETs keyed by subtask id. JSON: `{"3": 18000, ...}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WcetOverrides(pub BTreeMap<u32, u64>);

impl WcetOverrides {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TimingError> {
        let path = path.as_ref();
        let err = |detail: String| TimingError::OverrideFile {
            path: path.display().to_string(),
            detail,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

pub fn estimate_costs(
    sg: &SubtaskGraph,
    hw: &HardwareConfig,
    overrides: &WcetOverrides,
) -> Result<BTreeMap<u32, CostEstimate>, TimingError> {
    for (&id, &cycles) in &overrides.0 {
        if sg.subtask(id).is_none() {
            return Err(TimingError::UnknownSubtask(id));
        }
        if cycles == 0 {
            return Err(TimingError::ZeroOverride(id));
        }
    }
    Ok(sg
        .subtasks
        .iter()
        .map(|st| {
            let analytic = wcet_subtask(st, hw);
            let est = match overrides.0.get(&st.id) {
                Some(&cycles) => CostEstimate {
                    wcet_cycles: cycles,
                    derived_from: CostBasis::Override {
                        analytic_cycles: analytic.wcet_cycles,
                    },
                },
                None => analytic,
            };
            (st.id, est)
        })
        .collect())
}
