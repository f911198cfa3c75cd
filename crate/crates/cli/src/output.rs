//! Atomic output staging. Every command writes to temporary files next to
//! their final destinations and renames them into place only after all
//! writes succeeded, so a failed command leaves no partial outputs behind.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::error::CliError;

/// Collects temp-file/destination pairs; [`Stage::commit`] renames them all.
/// Dropping an uncommitted stage deletes every temp file.
#[derive(Default)]
pub struct Stage {
    staged: Vec<(NamedTempFile, PathBuf)>,
}

impl Stage {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `destination` and returns the temporary path to write to.
    /// The temp file lives in the destination's directory so the final
    /// rename never crosses filesystems.
    pub fn path_for(&mut self, destination: impl AsRef<Path>) -> Result<PathBuf, CliError> {
        let destination = destination.as_ref();
        let parent = match destination.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent).map_err(|e| CliError::file(&parent, e))?;
        let file = tempfile::Builder::new()
            .prefix(".pixie-tmp.")
            .tempfile_in(&parent)
            .map_err(|e| CliError::file(&parent, e))?;
        let path = file.path().to_path_buf();
        self.staged.push((file, destination.to_path_buf()));
        Ok(path)
    }

    /// Renames every staged file into place, overwriting existing files.
    pub fn commit(self) -> Result<(), CliError> {
        for (file, destination) in self.staged {
            file.persist(&destination)
                .map_err(|e| CliError::file(destination, e.error))?;
        }
        Ok(())
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::file(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_string(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::file(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path).map_err(|e| CliError::file(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
