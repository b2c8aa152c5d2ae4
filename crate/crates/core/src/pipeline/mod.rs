//! End-to-end orchestration: configuration, stage execution, run
//! directories with hashed artifacts, and resumption.

mod config;
mod manifest;
mod run;
pub mod stages;

pub use config::{BackendConfig, EmbeddingConfig, EmbeddingKind, RunConfig, TemplateConfig};
pub use manifest::{
    read_json, read_jsonl, to_jsonl, RunManifest, RuntimeInfo, Stage, StageArtifact, StageRecord, AUDIT_FILE,
    MANIFEST_FILE,
};
pub use run::*;
