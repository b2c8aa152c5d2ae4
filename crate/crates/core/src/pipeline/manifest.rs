use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const AUDIT_FILE: &str = "audit.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Similarity,
    Seg,
    Ceg,
    Merge,
    Adapt,
    Metrics,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Similarity,
        Stage::Seg,
        Stage::Ceg,
        Stage::Merge,
        Stage::Adapt,
        Stage::Metrics,
        Stage::Export,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Similarity => "similarity",
            Stage::Seg => "seg",
            Stage::Ceg => "ceg",
            Stage::Merge => "merge",
            Stage::Adapt => "adapt",
            Stage::Metrics => "metrics",
            Stage::Export => "export",
        }
    }

    /// Stage that issues requests with the given tag.
    pub fn of_request_tag(tag: &str) -> Option<Stage> {
        match tag.split('/').next()? {
            "desc" | "spark" | "seg" => Some(Stage::Seg),
            "disc" | "ceg" => Some(Stage::Ceg),
            "verify" | "modify" | "ca_disc" => Some(Stage::Adapt),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let lower = match lower.as_str() {
            "ca" | "class_adaptation" => "adapt",
            other => other,
        };
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == lower)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageArtifact {
    pub stage: Stage,
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub records: usize,
}

impl StageArtifact {
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(&self.path);
        let bytes = fs::read(&path).map_err(|_| Error::HashMismatch { path: path.clone() })?;
        if sha256_hex(&bytes) != self.sha256 {
            return Err(Error::HashMismatch { path });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
    pub artifacts: Vec<StageArtifact>,
    pub counts: BTreeMap<String, usize>,
    /// Backend attempts issued during this stage.
    pub backend_calls: usize,
}

/// Schedule-dependent facts, kept apart so the rest of the manifest is a
/// pure function of the inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub stage_wall_ms: BTreeMap<String, u64>,
    pub embedding_fetch_calls: usize,
    pub embedding_fetched_texts: usize,
    pub resumed_from: Option<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub dataset_path: String,
    pub dataset_sha256: String,
    pub backend_id: String,
    pub embedding_model: String,
    pub stages: Vec<StageRecord>,
    pub last_completed_stage: Option<Stage>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Sum of per-stage backend calls; equals the audit-log line count.
    pub backend_calls: usize,
    pub runtime: RuntimeInfo,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&run_dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &StageArtifact> {
        self.stages.iter().flat_map(|s| s.artifacts.iter())
    }

    /// Re-hashes every recorded artifact, naming the first one that differs.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        self.artifacts().try_for_each(|a| a.verify(run_dir))
    }

    /// Manifest JSON without the runtime section.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("runtime");
        }
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `items` as JSONL under `run_dir` and returns the artifact entry.
pub fn write_jsonl_artifact<T: Serialize>(run_dir: &Path, stage: Stage, name: &str, items: &[T]) -> Result<StageArtifact> {
    write_bytes_artifact(run_dir, stage, name, to_jsonl(items)?.as_bytes(), items.len())
}

pub fn write_json_artifact<T: Serialize>(
    run_dir: &Path,
    stage: Stage,
    name: &str,
    value: &T,
    records: usize,
) -> Result<StageArtifact> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes_artifact(run_dir, stage, name, text.as_bytes(), records)
}

pub fn write_bytes_artifact(run_dir: &Path, stage: Stage, name: &str, bytes: &[u8], records: usize) -> Result<StageArtifact> {
    write_atomic(&run_dir.join(name), bytes)?;
    Ok(StageArtifact {
        stage,
        path: name.to_string(),
        sha256: sha256_hex(bytes),
        records,
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
