use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EsplConfig, OrchestratorError, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run bit-for-bit. Randomness is derived
/// from `(seed, purpose, iteration)`, so the seed and the iteration counter
/// are the whole RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub config: EsplConfig,
    pub seed: u64,
    pub state: TrainState,
    /// Lines of the metrics log (header included) this state accounts for.
    pub metrics_lines: u64,
}

fn err(path: &Path, e: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes to a temporary sibling, syncs, then renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), OrchestratorError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| err(&tmp, e))?;
    f.sync_all().map_err(|e| err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| err(path, e))
}

impl Checkpoint {
    pub fn file_name(iteration: u64) -> String {
        format!("ckpt-{iteration:06}.json")
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, OrchestratorError> {
        fs::create_dir_all(dir).map_err(|e| err(dir, e))?;
        let path = dir.join(Self::file_name(self.state.iteration));
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| err(&path, e))?;
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    /// Loads and checks the format version and the config hash.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let bytes = fs::read(path).map_err(|e| err(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| err(path, e))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(err(path, format!("unsupported checkpoint version {}", ckpt.version)));
        }
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(err(path, "config hash does not match the embedded config"));
        }
        ckpt.state
            .population
            .validate()
            .map_err(|e| err(path, e))?;
        Ok(ckpt)
    }

    /// The highest-numbered checkpoint in `dir`.
    pub fn latest(dir: &Path) -> Result<Option<PathBuf>, OrchestratorError> {
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".json"))
            })
            .collect();
        found.sort();
        Ok(found.pop())
    }
}
