#![allow(dead_code)]

pub mod golden;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use tardis_core::pipeline::{BackendConfig, RunConfig, RunManifest, AUDIT_FILE, MANIFEST_FILE};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Small offline config over the transport fixture.
pub fn small_config() -> RunConfig {
    RunConfig {
        shots: 5,
        rounds_per_class: Some(6),
        n_ambiguous: 2,
        m_shots: 6,
        rng_seed: 11,
        max_in_flight: 4,
        backend: BackendConfig::Mock {
            script: fixture("misalign_script.json"),
        },
        ..RunConfig::default()
    }
}

/// File name to bytes for every artifact in a run directory, with the
/// manifest's runtime section stripped and the audit log left out.
pub fn snapshot(run_dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(run_dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if name == AUDIT_FILE {
            continue;
        }
        let bytes = if name == MANIFEST_FILE {
            RunManifest::load(run_dir).unwrap().deterministic_json().unwrap().into_bytes()
        } else {
            std::fs::read(&path).unwrap()
        };
        out.insert(name, bytes);
    }
    out
}
