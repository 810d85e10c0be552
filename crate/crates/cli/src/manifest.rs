//! Run manifest: digests of config, templates, stage inputs, and produced
//! artifacts. A stage is skipped when its recorded input digest matches and
//! every recorded artifact still hashes to the same value on disk.

use itemcal::elicit::PromptTemplate;
use itemcal::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::StagePrecondition(format!("missing artifact {}: {e}", path.display()))
    })?;
    Ok(digest_bytes(&bytes))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageEntry {
    /// Digest over everything the stage reads: config sections and
    /// predecessor artifacts.
    pub input_digest: String,
    /// Artifact path (relative to the output dir) to content digest.
    pub artifacts: BTreeMap<String, String>,
    pub completed_at: String,
    /// "ran" or "skipped" on the most recent invocation.
    pub last_action: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub template_digests: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    pub fn path(output_dir: &Path) -> PathBuf {
        output_dir.join("manifest.json")
    }

    pub fn load_or_new(output_dir: &Path) -> Result<Self> {
        let path = Self::path(output_dir);
        if path.exists() {
            let bytes = std::fs::read(&path)?;
            Ok(serde_json::from_slice(&bytes)?)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, output_dir: &Path) -> Result<()> {
        let path = Self::path(output_dir);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Records the static preamble; resets all stages if the config changed.
    pub fn align(&mut self, config_raw: &[u8], seeds: BTreeMap<String, u64>) {
        let config_digest = digest_bytes(config_raw);
        if self.config_digest != config_digest {
            self.stages.clear();
        }
        self.tool_version = env!("CARGO_PKG_VERSION").to_string();
        self.config_digest = config_digest;
        self.seeds = seeds;
        self.template_digests = [
            PromptTemplate::A,
            PromptTemplate::B,
            PromptTemplate::C,
            PromptTemplate::D,
        ]
        .iter()
        .map(|t| {
            let (system, user) = t.source();
            (
                format!("{t:?}"),
                digest_bytes(format!("{system}\u{0}{user}").as_bytes()),
            )
        })
        .collect();
    }

    /// True when the stage already ran with the same inputs and its artifacts
    /// are intact on disk.
    pub fn up_to_date(&self, output_dir: &Path, stage: &str, input_digest: &str) -> bool {
        let Some(entry) = self.stages.get(stage) else {
            return false;
        };
        if entry.input_digest != input_digest {
            return false;
        }
        entry.artifacts.iter().all(|(rel, digest)| {
            digest_file(&output_dir.join(rel)).is_ok_and(|d| &d == digest)
        })
    }

    pub fn record(
        &mut self,
        output_dir: &Path,
        stage: &str,
        input_digest: String,
        artifacts: &[PathBuf],
        action: &str,
    ) -> Result<()> {
        let mut digests = BTreeMap::new();
        for path in artifacts {
            let rel = path
                .strip_prefix(output_dir)
                .unwrap_or(path)
                .to_string_lossy()
                .into_owned();
            digests.insert(rel, digest_file(path)?);
        }
        self.stages.insert(
            stage.to_string(),
            StageEntry {
                input_digest,
                artifacts: digests,
                completed_at: chrono::Utc::now().to_rfc3339(),
                last_action: action.to_string(),
            },
        );
        Ok(())
    }

    pub fn mark_skipped(&mut self, stage: &str) {
        if let Some(entry) = self.stages.get_mut(stage) {
            entry.last_action = "skipped".into();
        }
    }

    /// Fails with an actionable message when a predecessor's artifacts are
    /// missing or stale.
    pub fn require_stage(&self, output_dir: &Path, stage: &str) -> Result<()> {
        let entry = self.stages.get(stage).ok_or_else(|| {
            Error::StagePrecondition(format!("stage '{stage}' has not run; run `itemcal {stage}` first"))
        })?;
        for (rel, digest) in &entry.artifacts {
            let on_disk = digest_file(&output_dir.join(rel)).map_err(|_| {
                Error::StagePrecondition(format!(
                    "artifact {rel} from stage '{stage}' is missing; rerun `itemcal {stage}`"
                ))
            })?;
            if &on_disk != digest {
                return Err(Error::StagePrecondition(format!(
                    "artifact {rel} does not match the manifest; rerun `itemcal {stage}`"
                )));
            }
        }
        Ok(())
    }
}

/// Exclusive lock on an output directory; removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(output_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(output_dir)?;
        let path = output_dir.join(".itemcal.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::StagePrecondition(format!(
                    "output directory is locked by another run (remove {} if stale)",
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
