use std::path::Path;

use super::{Schedule, ScheduleError};

/// Writes canonical pretty JSON; equal schedules give identical bytes.
pub fn emit_schedule(s: &Schedule, path: impl AsRef<Path>) -> Result<(), ScheduleError> {
    let path = path.as_ref();
    std::fs::write(path, s.to_json())
        .map_err(|e| ScheduleError::Artifact(format!("{}: {e}", path.display())))
}

pub fn load_schedule(path: impl AsRef<Path>) -> Result<Schedule, ScheduleError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScheduleError::Artifact(format!("{}: {e}", path.display())))?;
    Schedule::from_json(&text)
}
