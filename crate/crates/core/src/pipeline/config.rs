use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ceg::CegConfig;
use crate::embedding::{Embedder, EmbeddingCache, EmbeddingProvider, LocalHashEmbedder, RemoteEmbedder};
use crate::error::{Error, Result};
use crate::llm::{Backend, DecodingParams, MockScript, RemoteChatBackend, RetryPolicy, ScriptedMockBackend};
use crate::prompt::{builtin_template_set, load_template_dir, TemplateSet};
use crate::seg::{Method, SegConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Built-in mock that answers every prompt well-formed.
    #[default]
    Cooperative,
    Mock { script: PathBuf },
    /// OpenAI-compatible chat endpoint; the key comes from `TARDIS_API_KEY`.
    Remote { url: String, model: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingKind {
    Local,
    Remote { url: String, model: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingKind,
    /// Persistent cache file; in-memory when absent.
    pub cache: Option<PathBuf>,
    pub batch_size: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            provider: EmbeddingKind::Local,
            cache: None,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub domain: String,
    /// Directory laid out as `<domain>/<template id>.txt`; built-ins when absent.
    pub dir: Option<PathBuf>,
    pub domain_label: Option<String>,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            domain: "generic".into(),
            dir: None,
            domain_label: None,
        }
    }
}

/// Every knob of a run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub shots: usize,
    /// Generation calls per class and method; 50, or 25 with two or fewer shots.
    pub rounds_per_class: Option<usize>,
    pub k: usize,
    pub n_ambiguous: usize,
    pub ideas_per_seed: usize,
    pub m_shots: usize,
    pub repetition_penalty: f64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub rng_seed: u64,
    pub methods: Vec<Method>,
    /// Classes to augment; all classes when empty.
    pub target_classes: Vec<String>,
    /// Records kept per class after merging, split evenly across methods.
    pub per_class_budget: Option<usize>,
    pub include_seeds: bool,
    /// Held-out set for the nearest-centroid proxy evaluation.
    pub test_path: Option<PathBuf>,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub templates: TemplateConfig,
    pub backend: BackendConfig,
    pub embedding: EmbeddingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let decoding = DecodingParams::default();
        RunConfig {
            shots: 5,
            rounds_per_class: None,
            k: 5,
            n_ambiguous: 5,
            ideas_per_seed: 5,
            m_shots: 10,
            repetition_penalty: decoding.repetition_penalty,
            temperature: decoding.temperature,
            max_tokens: decoding.max_tokens,
            rng_seed: 0,
            methods: vec![Method::Seg, Method::Ceg],
            target_classes: Vec::new(),
            per_class_budget: None,
            include_seeds: true,
            test_path: None,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            templates: TemplateConfig::default(),
            backend: BackendConfig::default(),
            embedding: EmbeddingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a TOML config file. Relative paths inside it are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let BackendConfig::Mock { script } = &mut self.backend {
            fix(script);
        }
        if let Some(p) = &mut self.embedding.cache {
            fix(p);
        }
        if let Some(p) = &mut self.templates.dir {
            fix(p);
        }
        if let Some(p) = &mut self.test_path {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("shots", self.shots),
            ("k", self.k),
            ("n_ambiguous", self.n_ambiguous),
            ("ideas_per_seed", self.ideas_per_seed),
            ("m_shots", self.m_shots),
            ("max_in_flight", self.max_in_flight),
            ("embedding.batch_size", self.embedding.batch_size),
            ("rounds_per_class", self.rounds_per_class.unwrap_or(1)),
            ("per_class_budget", self.per_class_budget.unwrap_or(1)),
            ("retry.max_attempts", self.retry.max_attempts as usize),
            ("max_tokens", self.max_tokens as usize),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be at least 1")));
        }
        if !self.repetition_penalty.is_finite() || self.repetition_penalty < 1.0 {
            return Err(Error::Config(format!(
                "`repetition_penalty` must be >= 1.0, got {}",
                self.repetition_penalty
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!("`temperature` must be >= 0, got {}", self.temperature)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("`methods` must name SEG, CEG or both".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config("`methods` lists a method twice".into()));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.rounds_per_class
            .unwrap_or(if self.shots <= 2 { 25 } else { 50 })
    }

    pub fn uses(&self, method: Method) -> bool {
        self.methods.contains(&method)
    }

    pub fn decoding(&self) -> DecodingParams {
        DecodingParams {
            temperature: self.temperature,
            repetition_penalty: self.repetition_penalty,
            max_tokens: self.max_tokens,
        }
    }

    pub fn seg_config(&self) -> SegConfig {
        SegConfig {
            ideas_per_seed: self.ideas_per_seed,
            k: self.k,
            rounds: self.rounds(),
        }
    }

    pub fn ceg_config(&self) -> CegConfig {
        CegConfig {
            n_ambiguous: self.n_ambiguous,
            k: self.k,
            rounds: self.rounds(),
        }
    }

    /// Worker pool bounding in-flight backend and embedding work.
    pub fn worker_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.max_in_flight)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }

    pub fn build_backend(&self) -> Result<Arc<dyn Backend>> {
        Ok(match &self.backend {
            BackendConfig::Cooperative => Arc::new(ScriptedMockBackend::cooperative(self.ideas_per_seed, self.k)),
            BackendConfig::Mock { script } => Arc::new(ScriptedMockBackend::new(MockScript::load(script)?)?),
            BackendConfig::Remote { url, model } => Arc::new(RemoteChatBackend::from_env(url.clone(), model.clone())),
        })
    }

    pub fn build_embedder(&self) -> Result<Embedder> {
        let provider: Arc<dyn EmbeddingProvider> = match &self.embedding.provider {
            EmbeddingKind::Local => Arc::new(LocalHashEmbedder::default()),
            EmbeddingKind::Remote { url, model } => Arc::new(RemoteEmbedder::from_env(url.clone(), model.clone())),
        };
        let cache = match &self.embedding.cache {
            Some(path) => EmbeddingCache::open(path)?,
            None => EmbeddingCache::in_memory(),
        };
        Ok(Embedder::new(provider, Arc::new(cache)).with_batch_size(self.embedding.batch_size))
    }

    pub fn build_templates(&self) -> Result<TemplateSet> {
        let domain = &self.templates.domain;
        let set = match &self.templates.dir {
            Some(dir) => load_template_dir(dir)?
                .into_iter()
                .find(|s| s.domain() == domain)
                .ok_or_else(|| Error::Config(format!("no `{domain}` templates under {}", dir.display())))?,
            None => builtin_template_set(domain).map_err(|e| Error::Config(e.to_string()))?,
        };
        Ok(match &self.templates.domain_label {
            Some(label) => set.with_domain_label(label.clone()),
            None => set,
        })
    }
}
