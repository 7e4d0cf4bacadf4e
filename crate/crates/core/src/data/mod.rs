//! NetPBM I/O, the on-disk dataset layout, and the synthetic generator.

mod dataset;
mod pgm;
mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use dataset::{
    frame_file_name, load_dataset, load_frames, load_sequence, numbered_files, save_dataset,
    sequence_dirs, Sequence,
};
pub use pgm::{encode_pgm, parse_pgm, read_mask, read_pgm, write_mask, write_pgm, GrayImage};
pub use synth::{generate, synth_generate, SequenceScript, ShapeKind, SynthConfig};

/// Writes `bytes` to a temp file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Fills a fresh directory with `fill` and moves it to `target` only if
/// `fill` succeeds. An existing non-empty `target` is refused.
pub fn build_dir_atomic<T>(target: &Path, fill: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if target.exists() {
        let mut entries = fs::read_dir(target).map_err(|e| Error::io(target, e))?;
        if entries.next().is_some() {
            return Err(Error::io(
                target,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "output directory is not empty",
                ),
            ));
        }
    }
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".staging-")
        .tempdir_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    let value = fill(staging.path())?;
    if target.exists() {
        fs::remove_dir(target).map_err(|e| Error::io(target, e))?;
    }
    let staged = staging.keep();
    if let Err(e) = fs::rename(&staged, target) {
        let _ = fs::remove_dir_all(&staged);
        return Err(Error::io(target, e));
    }
    Ok(value)
}
