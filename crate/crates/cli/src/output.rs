use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Files written by one command. Everything registered is deleted again
/// unless [`OutputSet::commit`] is reached.
#[derive(Debug)]
pub struct OutputSet {
    dir: PathBuf,
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputSet {
    /// Open `run.out`, creating it when `run.create_out` allows.
    pub fn open(cfg: &RunConfig) -> CliResult<Self> {
        let dir = cfg.run.out.clone();
        if !dir.is_dir() {
            if !cfg.run.create_out {
                return Err(CliError::io(
                    &dir,
                    io::Error::new(io::ErrorKind::NotFound, "output directory does not exist"),
                ));
            }
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        Ok(Self {
            dir,
            written: Vec::new(),
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Reserve `relative` under the output directory; parent directories
    /// are created.
    pub fn reserve(&mut self, relative: impl AsRef<Path>) -> CliResult<PathBuf> {
        let path = self.dir.join(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn write(&mut self, relative: impl AsRef<Path>, contents: &str) -> CliResult<PathBuf> {
        let path = self.reserve(relative)?;
        write_file(&path, contents)?;
        Ok(path)
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for path in &self.written {
            if path.exists() {
                if let Err(e) = fs::remove_file(path) {
                    log::warn!("could not remove partial output {}: {e}", path.display());
                }
            }
        }
    }
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| CliError::io(path, e))
}

/// Fail with an I/O error naming `path` when it is missing.
pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(
            path,
            io::Error::new(io::ErrorKind::NotFound, format!("{what} not found")),
        ))
    }
}

pub const DATASET_FILE: &str = "dataset.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const EMBEDDING_FILE: &str = "embedding.csv";
pub const EMBEDDING_PLOT: &str = "embedding.svg";
pub const PARTITION_FILE: &str = "partition.csv";
pub const PARTITION_PLOT: &str = "partition.svg";
pub const TRACE_DIR: &str = "traces";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PAIRED_FILE: &str = "paired.csv";
pub const LOSS_PLOT: &str = "loss_curves.svg";
pub const VERIFY_CSV: &str = "verify_report.csv";
pub const VERIFY_TEXT: &str = "verify_report.txt";
