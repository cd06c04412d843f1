//! Run configuration: one declarative TOML file that the CLI flags override.
//! Every run writes the fully resolved configuration beside its outputs, and
//! the struct round-trips through its file form losslessly.

use crate::error::{Error, Result};
use crate::io::WindowSpec;
use crate::srddl::HyperParams;
use crate::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads (informational; the current implementation is
    /// sequential, which keeps runs bitwise reproducible at any setting).
    pub threads: usize,
    pub hyper: HyperParams,
    pub synth: SynthConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 1,
            hyper: HyperParams::with_k(15),
            synth: SynthConfig::default(),
            window: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the resolved snapshot beside the run outputs.
    pub fn write_snapshot(&self, out_dir: &Path) -> Result<()> {
        crate::io::atomic_write(&out_dir.join("resolved_config.toml"), self.to_toml()?.as_bytes())
    }
}
