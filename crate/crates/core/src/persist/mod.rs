//! On-disk artifacts: binary checkpoints, run configuration files and
//! comma-separated run reports. Every file is written atomically.

mod checkpoint;
mod config;
mod report;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{
    pretrained_from_checkpoint, pretrained_to_checkpoint, tuned_from_checkpoint, tuned_to_checkpoint, Checkpoint,
    MAGIC, VERSION,
};
pub use config::{RunConfig, KEYS};
pub use report::{
    read_records, records_from_csv, records_to_csv, render_complexity, render_table, trace_to_csv, write_records,
    RunRecord, CSV_HEADER, TRACE_HEADER,
};

use crate::error::{Error, Result};

/// Writes to a temporary file in the target directory, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
