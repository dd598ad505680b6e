//! Reconstruction configuration (TOML).
//!
//! ```toml
//! n_sources = 2
//! t_coarse = 8
//! t_fine = 2
//! seed = 0
//! backend = "deterministic"     # or "gru:<dir>" with coarse.egru/fine.egru
//! provider = "patch-sobel"      # or "import:<dir>" with {view:04}_{stage}.fmap
//! # upsample_weights = "weights.bin"
//!
//! [coarse]
//! m_s = 4
//! m_p = 9
//!
//! [fine]
//! m_s = 2
//! m_p = 5
//! ```
//!
//! Every field has the default shown above; a missing file means defaults.

use super::{io_err, SceneError};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub m_s: usize,
    pub m_p: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructSettings {
    #[serde(default = "default_n_sources")]
    pub n_sources: usize,
    #[serde(default = "default_t_coarse")]
    pub t_coarse: usize,
    #[serde(default = "default_t_fine")]
    pub t_fine: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_provider")]
    pub provider: String,
    #[serde(default)]
    pub upsample_weights: Option<PathBuf>,
    #[serde(default = "default_coarse")]
    pub coarse: StageSettings,
    #[serde(default = "default_fine")]
    pub fine: StageSettings,
}

fn default_n_sources() -> usize {
    2
}
fn default_t_coarse() -> usize {
    8
}
fn default_t_fine() -> usize {
    2
}
fn default_backend() -> String {
    "deterministic".into()
}
fn default_provider() -> String {
    "patch-sobel".into()
}
fn default_coarse() -> StageSettings {
    StageSettings { m_s: 4, m_p: 9 }
}
fn default_fine() -> StageSettings {
    StageSettings { m_s: 2, m_p: 5 }
}

impl Default for ReconstructSettings {
    fn default() -> Self {
        Self {
            n_sources: default_n_sources(),
            t_coarse: default_t_coarse(),
            t_fine: default_t_fine(),
            seed: 0,
            backend: default_backend(),
            provider: default_provider(),
            upsample_weights: None,
            coarse: default_coarse(),
            fine: default_fine(),
        }
    }
}

/// Parsed `backend` string.
pub enum BackendSpec {
    Deterministic,
    /// Directory holding `coarse.egru` and `fine.egru`.
    Gru(PathBuf),
}

/// Parsed `provider` string.
pub enum ProviderSpec {
    PatchSobel,
    /// Directory holding `{view:04}_{coarse|fine}.fmap`.
    Import(PathBuf),
}

impl ReconstructSettings {
    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        toml::from_str(&text).map_err(|e| SceneError::Invalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn backend_spec(&self) -> Result<BackendSpec, String> {
        if self.backend == "deterministic" {
            Ok(BackendSpec::Deterministic)
        } else if let Some(dir) = self.backend.strip_prefix("gru:") {
            if dir.is_empty() {
                Err("backend 'gru:' needs a directory".into())
            } else {
                Ok(BackendSpec::Gru(PathBuf::from(dir)))
            }
        } else {
            Err(format!(
                "unknown backend '{}': expected 'deterministic' or 'gru:<dir>'",
                self.backend
            ))
        }
    }

    pub fn provider_spec(&self) -> Result<ProviderSpec, String> {
        if self.provider == "patch-sobel" {
            Ok(ProviderSpec::PatchSobel)
        } else if let Some(dir) = self.provider.strip_prefix("import:") {
            if dir.is_empty() {
                Err("provider 'import:' needs a directory".into())
            } else {
                Ok(ProviderSpec::Import(PathBuf::from(dir)))
            }
        } else {
            Err(format!(
                "unknown provider '{}': expected 'patch-sobel' or 'import:<dir>'",
                self.provider
            ))
        }
    }
}
