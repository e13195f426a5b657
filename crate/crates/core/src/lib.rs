//! Lightweight non-local blocks for mobile CNNs and a differentiable search
//! over where to insert them and how compact their features should be.
//!
//! Module map:
//! - [`tensor`]: dense tensors, reverse-mode autodiff, gradient checking.
//! - [`nl`]: non-local operators, wrappers and association-order selection.
//! - [`cost`]: multiply-add accounting and the differentiable expected cost.
//! - [`search`]: gates, indicator chains, EMA registers, architecture derivation.
//! - [`supernet`]: inverted-residual backbone with candidate sites.
//! - [`data`], [`train`]: datasets, training loops, checkpoints.
//! - [`verify`]: the gradient and equivalence suites behind the CLI.

pub mod cost;
pub mod data;
pub mod nl;
pub mod search;
pub mod supernet;
pub mod tensor;
pub mod train;
pub mod verify;

use std::io::Write;
use std::path::Path;

use tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("EMA registers at {0} were never updated")]
    UninitializedEma(String),
    #[error("{path}: {msg} (at byte offset {offset})")]
    Parse {
        path: String,
        offset: u64,
        msg: String,
    },
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let ctx = |e| Error::io(tmp.display().to_string(), e);
    let mut f = std::fs::File::create(&tmp).map_err(ctx)?;
    f.write_all(bytes).map_err(ctx)?;
    f.sync_all().map_err(ctx)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}
