use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::adapt::{adapt_all, AdaptConfig, AlignmentRecord};
use crate::ceg::{class_similarity, AmbiguousClassSet, ClassSimilarityMatrix, DiscriminativeCache, DiscriminativeText};
use crate::context::GenerationContext;
use crate::corpus::{dataset_to_jsonl, load_dataset, load_dataset_report, sample_seed, Dataset, DatasetFormat};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::llm::{read_audit_file, AuditLog, LlmGateway};
use crate::prompt::TemplateSet;
use crate::seg::{GenerationRecord, Method};

use super::config::RunConfig;
use super::manifest::{
    read_json, read_jsonl, to_jsonl, write_bytes_artifact, write_json_artifact, write_jsonl_artifact, RunManifest,
    RuntimeInfo, Stage, StageRecord, AUDIT_FILE,
};
use super::stages::{
    ceg_stage, compute_metrics, export_dataset, merge_records, resolve_target_classes, seg_stage,
};

pub const SEED_FILE: &str = "seed.jsonl";
pub const SELECTION_FILE: &str = "seed_selection.json";
pub const SIMILARITY_FILE: &str = "similarity.json";
pub const DESCRIPTIONS_FILE: &str = "class_descriptions.jsonl";
pub const SPARKS_FILE: &str = "spark_thoughts.jsonl";
pub const SEG_FILE: &str = "seg_generated.jsonl";
pub const AMBIGUOUS_FILE: &str = "ambiguous.json";
pub const DISCRIMINATIVE_FILE: &str = "discriminative.jsonl";
pub const CEG_FILE: &str = "ceg_generated.jsonl";
pub const MERGED_FILE: &str = "merged.jsonl";
pub const ALIGNED_FILE: &str = "aligned.jsonl";
pub const CA_DISCRIMINATIVE_FILE: &str = "ca_discriminative.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const AUGMENTED_FILE: &str = "augmented.jsonl";

#[derive(Default)]
struct State {
    full: Option<Dataset>,
    seed: Option<Dataset>,
    sim: Option<ClassSimilarityMatrix>,
    seg: Vec<GenerationRecord>,
    ceg: Vec<GenerationRecord>,
    discriminative: Vec<DiscriminativeText>,
    merged: Vec<GenerationRecord>,
    aligned: Vec<AlignmentRecord>,
}

impl State {
    fn seed(&self) -> Result<&Dataset> {
        self.seed
            .as_ref()
            .ok_or_else(|| Error::Precondition("seed data not loaded".into()))
    }

    fn sim(&self) -> Result<&ClassSimilarityMatrix> {
        self.sim
            .as_ref()
            .ok_or_else(|| Error::Precondition("class similarity not computed".into()))
    }
}

struct Runner {
    cfg: RunConfig,
    run_dir: PathBuf,
    dataset_path: PathBuf,
    gateway: LlmGateway,
    embedder: Embedder,
    templates: TemplateSet,
    manifest: RunManifest,
    state: State,
}

fn counts(pairs: &[(&str, usize)]) -> std::collections::BTreeMap<String, usize> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn dataset_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(fs::read(path).map_err(|e| Error::io(path, e))?))
}

impl Runner {
    fn new(cfg: RunConfig, dataset_path: PathBuf, run_dir: PathBuf, manifest: Option<RunManifest>) -> Result<Self> {
        cfg.validate()?;
        let templates = cfg.build_templates()?;
        let embedder = cfg.build_embedder()?;
        let audit = Arc::new(AuditLog::to_file(&run_dir.join(AUDIT_FILE))?);
        let gateway = LlmGateway::new(cfg.build_backend()?, cfg.retry, audit);
        let manifest = match manifest {
            Some(m) => m,
            None => RunManifest {
                config_hash: sha256_hex(serde_json::to_string(&cfg)?),
                config: cfg.clone(),
                dataset_path: dataset_path.display().to_string(),
                dataset_sha256: dataset_hash(&dataset_path)?,
                backend_id: gateway.backend_id().to_string(),
                embedding_model: format!("{}/{}", embedder.provider_id(), embedder.model_id()),
                stages: Vec::new(),
                last_completed_stage: None,
                complete: false,
                error: None,
                backend_calls: 0,
                runtime: RuntimeInfo::default(),
            },
        };
        Ok(Runner {
            cfg,
            run_dir,
            dataset_path,
            gateway,
            embedder,
            templates,
            manifest,
            state: State::default(),
        })
    }

    fn execute(&mut self, from: Stage) -> Result<RunManifest> {
        let pool = self.cfg.worker_pool()?;
        for stage in Stage::ALL.into_iter().filter(|s| *s >= from) {
            let started = Instant::now();
            let calls_before = self.gateway.audit().len();
            let result = pool.install(|| self.run_stage(stage));
            self.manifest
                .runtime
                .stage_wall_ms
                .insert(stage.to_string(), started.elapsed().as_millis() as u64);
            self.manifest.runtime.embedding_fetch_calls = self.embedder.fetch_calls();
            self.manifest.runtime.embedding_fetched_texts = self.embedder.fetched_texts();
            match result {
                Ok(mut record) => {
                    record.backend_calls = self.gateway.audit().len() - calls_before;
                    self.manifest.stages.retain(|s| s.stage != stage);
                    self.manifest.stages.push(record);
                    self.manifest.last_completed_stage = Some(stage);
                    self.manifest.backend_calls = self.manifest.stages.iter().map(|s| s.backend_calls).sum();
                    self.manifest.save(&self.run_dir)?;
                    log::info!("stage {stage} done");
                }
                Err(e) => {
                    self.manifest.error = Some(format!("stage {stage}: {e}"));
                    self.manifest.save(&self.run_dir)?;
                    return Err(e);
                }
            }
        }
        self.manifest.complete = true;
        self.manifest.error = None;
        self.manifest.save(&self.run_dir)?;
        Ok(self.manifest.clone())
    }

    fn ctx(&self) -> GenerationContext<'_> {
        GenerationContext::new(&self.gateway, &self.templates)
            .with_decoding(self.cfg.decoding())
            .with_rng_seed(self.cfg.rng_seed)
    }

    fn load_full(&mut self) -> Result<&Dataset> {
        if self.state.full.is_none() {
            if dataset_hash(&self.dataset_path)? != self.manifest.dataset_sha256 {
                return Err(Error::HashMismatch {
                    path: self.dataset_path.clone(),
                });
            }
            let format = DatasetFormat::from_path(&self.dataset_path);
            self.state.full = Some(load_dataset(&self.dataset_path, format)?);
        }
        Ok(self.state.full.as_ref().expect("just loaded"))
    }

    fn run_stage(&mut self, stage: Stage) -> Result<StageRecord> {
        let dir = self.run_dir.clone();
        let mut record = StageRecord {
            stage,
            skipped: false,
            artifacts: Vec::new(),
            counts: Default::default(),
            backend_calls: 0,
        };
        match stage {
            Stage::Ingest => {
                let format = DatasetFormat::from_path(&self.dataset_path);
                let loaded = load_dataset_report(&self.dataset_path, format)?;
                let full = loaded.dataset;
                full.ensure_seed_ready()?;
                let selection = sample_seed(&full, self.cfg.shots, self.cfg.rng_seed)?;
                let seed = selection.apply(&full).renamed("seed");
                record.artifacts.push(write_bytes_artifact(
                    &dir,
                    stage,
                    SEED_FILE,
                    dataset_to_jsonl(&seed).as_bytes(),
                    seed.len(),
                )?);
                record.artifacts.push(write_json_artifact(
                    &dir,
                    stage,
                    SELECTION_FILE,
                    &selection,
                    selection.selected_ids.len(),
                )?);
                record.counts = counts(&[
                    ("dataset_examples", full.len()),
                    ("classes", full.classes().len()),
                    ("seed_examples", seed.len()),
                    ("load_warnings", loaded.warnings.len()),
                ]);
                self.state.full = Some(full);
                self.state.seed = Some(seed);
            }
            Stage::Similarity => {
                let sim = class_similarity(self.state.seed()?, &self.embedder)?;
                record
                    .artifacts
                    .push(write_json_artifact(&dir, stage, SIMILARITY_FILE, &sim, sim.classes.len())?);
                record.counts = counts(&[("classes", sim.classes.len())]);
                self.state.sim = Some(sim);
            }
            Stage::Seg => {
                if !self.cfg.uses(Method::Seg) {
                    record.skipped = true;
                    self.state.seg.clear();
                    return Ok(record);
                }
                let seed = self.state.seed()?;
                let targets = resolve_target_classes(seed, &self.cfg.target_classes)?;
                let out = seg_stage(seed, &targets, &self.cfg.seg_config(), &self.ctx())?;
                record
                    .artifacts
                    .push(write_jsonl_artifact(&dir, stage, DESCRIPTIONS_FILE, &out.descriptions)?);
                record.artifacts.push(write_jsonl_artifact(&dir, stage, SPARKS_FILE, &out.sparks)?);
                record.artifacts.push(write_jsonl_artifact(&dir, stage, SEG_FILE, &out.records)?);
                record.counts = counts(&[
                    ("records", out.records.len()),
                    ("generation_calls", out.generation_calls),
                    ("short_calls", out.short_calls),
                    ("spark_thoughts", out.sparks.len()),
                    ("spark_shortfall", out.spark_shortfall),
                ]);
                self.state.seg = out.records;
            }
            Stage::Ceg => {
                if !self.cfg.uses(Method::Ceg) {
                    record.skipped = true;
                    self.state.ceg.clear();
                    self.state.discriminative.clear();
                    return Ok(record);
                }
                let seed = self.state.seed()?;
                let targets = resolve_target_classes(seed, &self.cfg.target_classes)?;
                let cache = DiscriminativeCache::new();
                let out = ceg_stage(seed, &targets, self.state.sim()?, &self.cfg.ceg_config(), &self.ctx(), &cache)?;
                record.artifacts.push(write_json_artifact(
                    &dir,
                    stage,
                    AMBIGUOUS_FILE,
                    &out.ambiguous,
                    out.ambiguous.len(),
                )?);
                record
                    .artifacts
                    .push(write_jsonl_artifact(&dir, stage, DISCRIMINATIVE_FILE, &out.discriminative)?);
                record.artifacts.push(write_jsonl_artifact(&dir, stage, CEG_FILE, &out.records)?);
                record.counts = counts(&[
                    ("records", out.records.len()),
                    ("generation_calls", out.generation_calls),
                    ("short_calls", out.short_calls),
                    ("discriminative_texts", out.discriminative.len()),
                ]);
                self.state.ceg = out.records;
                self.state.discriminative = out.discriminative;
            }
            Stage::Merge => {
                let seed = self.state.seed()?;
                let targets = resolve_target_classes(seed, &self.cfg.target_classes)?;
                let merged = merge_records(
                    &self.state.seg,
                    &self.state.ceg,
                    &targets,
                    &self.cfg.methods,
                    self.cfg.per_class_budget,
                    self.cfg.rng_seed,
                );
                record.artifacts.push(write_jsonl_artifact(&dir, stage, MERGED_FILE, &merged)?);
                let by = |m: Method| merged.iter().filter(|r| r.method == m).count();
                record.counts = counts(&[
                    ("records", merged.len()),
                    ("seg", by(Method::Seg)),
                    ("ceg", by(Method::Ceg)),
                ]);
                self.state.merged = merged;
            }
            Stage::Adapt => {
                let cache = DiscriminativeCache::from_entries(self.state.discriminative.iter().cloned());
                let config = AdaptConfig {
                    m_shots: self.cfg.m_shots,
                };
                let out = adapt_all(
                    &self.state.merged,
                    self.state.seed()?,
                    &config,
                    &self.ctx(),
                    &self.embedder,
                    &cache,
                )?;
                let from_ceg: std::collections::BTreeSet<(&str, &str)> = self
                    .state
                    .discriminative
                    .iter()
                    .map(|d| (d.target.as_str(), d.contrast.as_str()))
                    .collect();
                let on_demand: Vec<DiscriminativeText> = cache
                    .entries()
                    .into_iter()
                    .filter(|d| !from_ceg.contains(&(d.target.as_str(), d.contrast.as_str())))
                    .collect();
                record.artifacts.push(write_jsonl_artifact(&dir, stage, ALIGNED_FILE, &out.records)?);
                record
                    .artifacts
                    .push(write_jsonl_artifact(&dir, stage, CA_DISCRIMINATIVE_FILE, &on_demand)?);
                let s = out.summary;
                record.counts = counts(&[
                    ("records", out.records.len()),
                    ("aligned", s.aligned),
                    ("misaligned", s.misaligned),
                    ("modified", s.modified),
                    ("modification_failed", s.modification_failed),
                    ("verification_failed", s.verification_failed),
                    ("on_demand_discriminative", s.on_demand_discriminative),
                ]);
                self.state.aligned = out.records;
            }
            Stage::Metrics => {
                self.load_full()?;
                let test = match &self.cfg.test_path {
                    Some(p) => Some(load_dataset(p, DatasetFormat::from_path(p))?),
                    None => None,
                };
                let report = compute_metrics(
                    self.state.seed()?,
                    &self.state.aligned,
                    self.state.full.as_ref(),
                    test.as_ref(),
                    &self.embedder,
                )?;
                record
                    .artifacts
                    .push(write_json_artifact(&dir, stage, METRICS_FILE, &report, 1)?);
                record.counts = counts(&[("notes", report.notes.len())]);
            }
            Stage::Export => {
                let seed = self.state.seed()?;
                let out = export_dataset(seed, &self.state.aligned, self.cfg.include_seeds)?;
                record.artifacts.push(write_bytes_artifact(
                    &dir,
                    stage,
                    AUGMENTED_FILE,
                    dataset_to_jsonl(&out).as_bytes(),
                    out.len(),
                )?);
                record.counts = counts(&[
                    ("records", out.len()),
                    ("generated", self.state.aligned.len()),
                    ("seeds", out.len() - self.state.aligned.len()),
                ]);
            }
        }
        Ok(record)
    }

    /// Reads the outputs of a completed stage back into memory.
    fn load_stage(&mut self, stage: Stage) -> Result<()> {
        let dir = self.run_dir.clone();
        let skipped = self.manifest.stage(stage).is_some_and(|s| s.skipped);
        match stage {
            Stage::Ingest => {
                self.state.seed = Some(load_dataset(&dir.join(SEED_FILE), DatasetFormat::Jsonl)?.renamed("seed"));
            }
            Stage::Similarity => self.state.sim = Some(read_json(&dir.join(SIMILARITY_FILE))?),
            Stage::Seg if !skipped => self.state.seg = read_jsonl(&dir.join(SEG_FILE))?,
            Stage::Ceg if !skipped => {
                self.state.ceg = read_jsonl(&dir.join(CEG_FILE))?;
                self.state.discriminative = read_jsonl(&dir.join(DISCRIMINATIVE_FILE))?;
                let _: Vec<AmbiguousClassSet> = read_json(&dir.join(AMBIGUOUS_FILE))?;
            }
            Stage::Merge => self.state.merged = read_jsonl(&dir.join(MERGED_FILE))?,
            Stage::Adapt => self.state.aligned = read_jsonl(&dir.join(ALIGNED_FILE))?,
            _ => {}
        }
        Ok(())
    }
}

/// Runs every stage on `dataset_path`, writing artifacts, `audit.jsonl`
/// and `manifest.json` into `run_dir`.
pub fn run_full_pipeline(config: &RunConfig, dataset_path: &Path, run_dir: &Path) -> Result<RunManifest> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let audit = run_dir.join(AUDIT_FILE);
    if audit.exists() {
        fs::remove_file(&audit).map_err(|e| Error::io(&audit, e))?;
    }
    let mut runner = Runner::new(config.clone(), dataset_path.to_path_buf(), run_dir.to_path_buf(), None)?;
    runner.execute(Stage::Ingest)
}

/// Re-runs `from` and every later stage of an existing run, reusing the
/// verified artifacts of the earlier stages.
pub fn resume_stage(run_dir: &Path, from: Stage) -> Result<RunManifest> {
    let mut manifest = RunManifest::load(run_dir)?;
    for stage in Stage::ALL.into_iter().filter(|s| *s < from) {
        let record = manifest.stage(stage).ok_or_else(|| {
            Error::Precondition(format!("cannot resume from {from}: stage {stage} has not completed"))
        })?;
        for artifact in &record.artifacts {
            artifact.verify(run_dir)?;
        }
    }

    let audit_path = run_dir.join(AUDIT_FILE);
    let kept: Vec<_> = if audit_path.exists() {
        read_audit_file(&audit_path)?
            .into_iter()
            .filter(|e| Stage::of_request_tag(&e.request_tag).is_some_and(|s| s < from))
            .collect()
    } else {
        Vec::new()
    };
    fs::write(&audit_path, to_jsonl(&kept)?).map_err(|e| Error::io(&audit_path, e))?;

    manifest.stages.retain(|s| s.stage < from);
    manifest.last_completed_stage = manifest.stages.iter().map(|s| s.stage).max();
    manifest.backend_calls = manifest.stages.iter().map(|s| s.backend_calls).sum();
    manifest.complete = false;
    manifest.error = None;
    manifest.runtime = RuntimeInfo {
        resumed_from: Some(from),
        ..RuntimeInfo::default()
    };
    let config = manifest.config.clone();
    let dataset_path = PathBuf::from(&manifest.dataset_path);
    let mut runner = Runner::new(config, dataset_path, run_dir.to_path_buf(), Some(manifest))?;
    for stage in Stage::ALL.into_iter().filter(|s| *s < from) {
        runner.load_stage(stage)?;
    }
    runner.execute(from)
}
