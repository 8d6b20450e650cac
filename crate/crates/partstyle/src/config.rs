//! Run configuration files.
//!
//! One TOML document describes a complete stylization run: which mesh and
//! parts sidecar to load, the prompt, where artifacts go, the full set of
//! training knobs, and (only when the pretrained backend is selected) how to
//! launch the external grounding runner. The CLI reads one of these files and
//! lets individual flags override fields; the effective configuration is
//! snapshotted into the run directory so every run is reproducible from its
//! own artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::AdapterConfig;
use crate::trainer::TrainConfig;

/// Errors from reading or parsing a run configuration file.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

/// A complete run described as one TOML file.
///
/// Unknown keys are rejected at every nesting level so a typo fails loudly
/// instead of silently meaning the default. Defaults: `parts` falls back to
/// the mesh path with its extension replaced by `parts.toml`, `out_dir` to
/// `runs`, `train` to [`TrainConfig::default`], `adapter` to none.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mesh geometry, ASCII OBJ triangles.
    pub mesh: PathBuf,
    /// Parts sidecar (TOML `[[part]]` tables). None derives it from `mesh`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<PathBuf>,
    /// Comma-separated "<style words> <part>" pairs.
    pub prompt: String,
    /// Directory that per-run directories are created under.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Optimization, rendering, and backend settings (`[train]` table).
    #[serde(default)]
    pub train: TrainConfig,
    /// External grounding runner (`[adapter]` table); required by the
    /// pretrained backend, ignored by the others.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    /// The effective parts sidecar path.
    pub fn parts_path(&self) -> PathBuf {
        self.parts.clone().unwrap_or_else(|| default_parts_path(&self.mesh))
    }

    /// Serialize back to TOML, e.g. to snapshot the effective configuration
    /// after flag overrides.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

/// Sidecar convention: `meshes/kettle.obj` sits next to
/// `meshes/kettle.parts.toml`.
pub fn default_parts_path(mesh: &Path) -> PathBuf {
    mesh.with_extension("parts.toml")
}

/// Read and parse a TOML run configuration file.
pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })
}
