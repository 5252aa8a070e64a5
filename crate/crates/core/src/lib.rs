//! Compiler and checker for time-triggered deployment of quantized CNNs on a
//! multi-core vector processor with private scratchpads and a shared DMA engine.

pub mod mapping;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod reference;
pub mod schedule;
pub mod sim;
pub mod timing;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model: {0}")]
    Model(#[from] model::ModelError),
    #[error("partitioner: {0}")]
    Partition(#[from] partition::PartitionError),
    #[error("timing: {0}")]
    Timing(#[from] timing::TimingError),
    #[error("scheduler: {0}")]
    Schedule(#[from] schedule::ScheduleError),
    #[error("simulator: {0}")]
    Sim(#[from] sim::SimError),
    #[error("reference: {0}")]
    Exec(#[from] reference::ExecError),
}

impl Error {
    /// 3 for resource exhaustion (tile budget, scratchpad), 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Partition(partition::PartitionError::Infeasible { .. })
            | Error::Schedule(schedule::ScheduleError::Overflow { .. }) => 3,
            _ => 2,
        }
    }
}
