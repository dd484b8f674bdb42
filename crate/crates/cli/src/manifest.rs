use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::args::RestoreParams;
use crate::error::{CliError, CliResult};

pub const FORMAT: &str = "ddnm-manifest/1";

/// Record of one `restore` invocation: every parameter plus per-seed results.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub version: String,
    pub params: RestoreParams,
    pub runs: Vec<RunRecord>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub output: PathBuf,
    pub preview: Option<PathBuf>,
    pub wall_ms: f64,
    /// `||A x0 - y||_1`, when the method has an observation.
    pub consistency_l1: Option<f64>,
    pub consistency_max: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

impl Manifest {
    pub fn new(params: RestoreParams, runs: Vec<RunRecord>) -> Self {
        Self {
            format: FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            params,
            runs,
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::io(path, e))?;
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
        if m.format != FORMAT {
            return Err(CliError::io(path, format!("unknown manifest format `{}`", m.format)));
        }
        Ok(m)
    }
}
