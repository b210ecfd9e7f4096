use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uma_core::digest::sha256_hex;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: String,
    pub sha256: String,
}

/// Index of everything a run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_digest: String,
    pub master_seed: u64,
    /// Every seed handed to a stage, keyed by its derivation label.
    pub seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, StageRecord>,
    /// Relative path → digest.
    pub artifacts: BTreeMap<String, Artifact>,
    /// Report files in row order.
    #[serde(default)]
    pub reports: Vec<String>,
}

impl Manifest {
    pub fn new(config_digest: String, master_seed: u64) -> Self {
        Self {
            version: MANIFEST_VERSION,
            config_digest,
            master_seed,
            seeds: BTreeMap::new(),
            stages: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            reports: Vec::new(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = Self::path(dir);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Integrity(format!("cannot read {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| CliError::Integrity(format!("manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(CliError::Integrity(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("serializable manifest");
        std::fs::write(Self::path(dir), text + "\n").map_err(|e| CliError::stage("manifest", e))
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.stages.get(stage).map(|r| r.status == StageStatus::Done).unwrap_or(false)
    }

    pub fn mark(&mut self, stage: &str, cause: Option<String>) {
        let status = if cause.is_some() { StageStatus::Failed } else { StageStatus::Done };
        self.stages.insert(stage.to_string(), StageRecord { status, cause });
    }

    /// Forgets `stage` and its artifacts.
    pub fn reset(&mut self, stage: &str) {
        self.stages.remove(stage);
        self.artifacts.retain(|_, a| a.stage != stage);
    }

    pub fn record(&mut self, stage: &str, rel: &str, bytes: &[u8]) {
        self.artifacts.insert(rel.to_string(), Artifact { stage: stage.to_string(), sha256: sha256_hex(bytes) });
    }

    /// Checks one listed artifact against its recorded digest.
    pub fn verify_file(&self, dir: &Path, rel: &str) -> Result<Vec<u8>, CliError> {
        let entry = self
            .artifacts
            .get(rel)
            .ok_or_else(|| CliError::Integrity(format!("{rel} is not listed in the manifest")))?;
        let bytes = std::fs::read(dir.join(rel)).map_err(|e| CliError::Integrity(format!("{rel}: {e}")))?;
        let found = sha256_hex(&bytes);
        if found != entry.sha256 {
            return Err(CliError::Integrity(format!("{rel}: digest {found} != recorded {}", entry.sha256)));
        }
        Ok(bytes)
    }

    /// Verifies every artifact of `stage`.
    pub fn verify_stage(&self, dir: &Path, stage: &str) -> Result<(), CliError> {
        for (rel, a) in &self.artifacts {
            if a.stage == stage {
                self.verify_file(dir, rel)?;
            }
        }
        Ok(())
    }

    pub fn verify_all(&self, dir: &Path) -> Result<(), CliError> {
        for rel in self.artifacts.keys() {
            self.verify_file(dir, rel)?;
        }
        Ok(())
    }
}
