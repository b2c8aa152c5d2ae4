use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tardis_core::adapt::{adapt_all, AdaptConfig, AlignmentRecord};
use tardis_core::ceg::{class_similarity, ClassSimilarityMatrix, DiscriminativeCache, DiscriminativeText};
use tardis_core::context::GenerationContext;
use tardis_core::corpus::{load_dataset, load_dataset_report, sample_seed, write_dataset, Dataset, DatasetFormat, LabeledExample};
use tardis_core::llm::{AuditLog, LlmGateway};
use tardis_core::metrics::{aps_report, confusion_accounting_phase, nearest_centroid_eval, CentroidLabeler, ConfusionPhase};
use tardis_core::pipeline::stages::{ceg_stage, resolve_target_classes, seg_stage, MetricsReport};
use tardis_core::pipeline::{
    read_json, read_jsonl, resume_stage, run_full_pipeline, to_jsonl, BackendConfig, RunConfig, Stage, AMBIGUOUS_FILE,
    AUDIT_FILE, CA_DISCRIMINATIVE_FILE, CEG_FILE, DESCRIPTIONS_FILE, DISCRIMINATIVE_FILE, SEED_FILE, SEG_FILE,
    SELECTION_FILE, SPARKS_FILE, ALIGNED_FILE,
};
use tardis_core::seg::{GenerationRecord, Method};
use tardis_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tardis", version, about = "Two-stage LLM text augmentation for few-shot classification")]
struct Cli {
    /// TOML config; keys mirror the run configuration fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log progress (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a labeled dataset and sample the few-shot seed set.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class-to-class similarity matrix over the seed set.
    Similarity {
        #[arg(long)]
        seed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Semantic-enrichment generation.
    Seg {
        #[arg(long)]
        seed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Contrastive-enrichment generation.
    Ceg {
        #[arg(long)]
        seed: PathBuf,
        /// Precomputed similarity matrix; computed from the seed set otherwise.
        #[arg(long)]
        similarity: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Verify generated records and rewrite the misaligned ones.
    Adapt {
        #[arg(long)]
        seed: PathBuf,
        /// Generation record files (seg_generated.jsonl, ceg_generated.jsonl).
        #[arg(long, num_args = 1.., required = true)]
        records: Vec<PathBuf>,
        /// Discriminative texts to reuse instead of regenerating.
        #[arg(long)]
        discriminative: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// APS report for seed and augmented data, plus confusion and proxy
    /// accuracy when their inputs are given.
    Metrics {
        #[arg(long)]
        seed: PathBuf,
        #[arg(long)]
        augmented: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// aligned.jsonl from the adapt step, for confusion accounting.
        #[arg(long, requires = "reference")]
        aligned: Option<PathBuf>,
        /// Labeled pool the nearest-centroid reference is fit on.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Nearest-centroid accuracy of a training file on a test file.
    Eval {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Full pipeline into a run directory.
    Run {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-run a run directory from a stage onward.
    Resume {
        #[arg(long)]
        run_dir: PathBuf,
        /// ingest, similarity, seg, ceg, merge, adapt, metrics or export.
        #[arg(long)]
        from: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Csv,
}

impl From<Format> for DatasetFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Jsonl => DatasetFormat::Jsonl,
            Format::Csv => DatasetFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Seg,
    Ceg,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_ambiguous: Option<usize>,
    #[arg(long)]
    ideas_per_seed: Option<usize>,
    #[arg(long)]
    m_shots: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    repetition_penalty: Option<f64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Option<Vec<MethodArg>>,
    /// Only augment these classes.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[arg(long)]
    per_class_budget: Option<usize>,
    /// Export generated records without the seed examples.
    #[arg(long)]
    no_seeds: bool,
    #[arg(long)]
    test_path: Option<PathBuf>,
    /// Scripted mock backend instead of the configured one.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// OpenAI-compatible endpoint; needs --model.
    #[arg(long, requires = "model")]
    backend_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    templates_dir: Option<PathBuf>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    embedding_cache: Option<PathBuf>,
}

impl Overrides {
    fn apply(self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            rng_seed => cfg.rng_seed,
            k => cfg.k,
            n_ambiguous => cfg.n_ambiguous,
            ideas_per_seed => cfg.ideas_per_seed,
            m_shots => cfg.m_shots,
            temperature => cfg.temperature,
            repetition_penalty => cfg.repetition_penalty,
            max_in_flight => cfg.max_in_flight,
            domain => cfg.templates.domain,
            classes => cfg.target_classes,
        );
        if let Some(r) = self.rounds {
            cfg.rounds_per_class = Some(r);
        }
        if let Some(b) = self.per_class_budget {
            cfg.per_class_budget = Some(b);
        }
        if let Some(p) = self.test_path {
            cfg.test_path = Some(p);
        }
        if let Some(d) = self.templates_dir {
            cfg.templates.dir = Some(d);
        }
        if let Some(c) = self.embedding_cache {
            cfg.embedding.cache = Some(c);
        }
        if let Some(methods) = self.methods {
            cfg.methods = methods
                .into_iter()
                .map(|m| match m {
                    MethodArg::Seg => Method::Seg,
                    MethodArg::Ceg => Method::Ceg,
                })
                .collect();
        }
        if self.no_seeds {
            cfg.include_seeds = false;
        }
        if let Some(script) = self.mock_script {
            cfg.backend = BackendConfig::Mock { script };
        }
        if let (Some(url), Some(model)) = (self.backend_url, self.model) {
            cfg.backend = BackendConfig::Remote { url, model };
        }
    }
}

fn load_config(path: Option<&Path>, overrides: Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path, DatasetFormat::from_path(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Backend, templates and embedder for one standalone stage, auditing
/// into `out/audit.jsonl`.
struct Session {
    cfg: RunConfig,
    gateway: LlmGateway,
    templates: tardis_core::prompt::TemplateSet,
}

impl Session {
    fn open(cfg: RunConfig, out: &Path) -> Result<Self> {
        create_dir(out)?;
        let audit = Arc::new(AuditLog::to_file(&out.join(AUDIT_FILE))?);
        let gateway = LlmGateway::new(cfg.build_backend()?, cfg.retry, audit);
        let templates = cfg.build_templates()?;
        Ok(Session { cfg, gateway, templates })
    }

    fn ctx(&self) -> GenerationContext<'_> {
        GenerationContext::new(&self.gateway, &self.templates)
            .with_decoding(self.cfg.decoding())
            .with_rng_seed(self.cfg.rng_seed)
    }
}

#[derive(Serialize)]
struct StageSummary {
    records: usize,
    generation_calls: usize,
    short_calls: usize,
    backend_calls: usize,
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Ingest {
            input,
            format,
            shots,
            seed,
            out,
        } => {
            let mut cfg = load_config(config, Overrides::default())?;
            cfg.shots = shots.unwrap_or(cfg.shots);
            cfg.rng_seed = seed.unwrap_or(cfg.rng_seed);
            cfg.validate()?;
            let format = format.map(Into::into).unwrap_or_else(|| DatasetFormat::from_path(&input));
            let loaded = load_dataset_report(&input, format)?;
            loaded.dataset.ensure_seed_ready()?;
            let selection = sample_seed(&loaded.dataset, cfg.shots, cfg.rng_seed)?;
            let seed = selection.apply(&loaded.dataset).renamed("seed");
            create_dir(&out)?;
            write_dataset(&seed, &out.join(SEED_FILE))?;
            write_json(&out.join(SELECTION_FILE), &selection)?;
            for w in &loaded.warnings {
                log::warn!("{w}");
            }
            println!(
                "{} examples over {} classes; {} seed examples written to {}",
                loaded.dataset.len(),
                loaded.dataset.classes().len(),
                seed.len(),
                out.join(SEED_FILE).display()
            );
        }
        Command::Similarity { seed, out, overrides } => {
            let cfg = load_config(config, overrides)?;
            let seed = load(&seed)?;
            let sim = cfg.worker_pool()?.install(|| class_similarity(&seed, &cfg.build_embedder()?))?;
            write_json(&out, &sim)?;
        }
        Command::Seg { seed, out, overrides } => {
            let session = Session::open(load_config(config, overrides)?, &out)?;
            let seed = load(&seed)?;
            let classes = resolve_target_classes(&seed, &session.cfg.target_classes)?;
            let res = session
                .cfg
                .worker_pool()?
                .install(|| seg_stage(&seed, &classes, &session.cfg.seg_config(), &session.ctx()))?;
            write(&out.join(DESCRIPTIONS_FILE), to_jsonl(&res.descriptions)?)?;
            write(&out.join(SPARKS_FILE), to_jsonl(&res.sparks)?)?;
            write(&out.join(SEG_FILE), to_jsonl(&res.records)?)?;
            print_json(&StageSummary {
                records: res.records.len(),
                generation_calls: res.generation_calls,
                short_calls: res.short_calls,
                backend_calls: session.gateway.calls(),
            })?;
        }
        Command::Ceg {
            seed,
            similarity,
            out,
            overrides,
        } => {
            let session = Session::open(load_config(config, overrides)?, &out)?;
            let seed = load(&seed)?;
            let classes = resolve_target_classes(&seed, &session.cfg.target_classes)?;
            let pool = session.cfg.worker_pool()?;
            let sim: ClassSimilarityMatrix = match similarity {
                Some(p) => read_json(&p)?,
                None => pool.install(|| class_similarity(&seed, &session.cfg.build_embedder()?))?,
            };
            let cache = DiscriminativeCache::new();
            let res = pool.install(|| ceg_stage(&seed, &classes, &sim, &session.cfg.ceg_config(), &session.ctx(), &cache))?;
            write_json(&out.join(AMBIGUOUS_FILE), &res.ambiguous)?;
            write(&out.join(DISCRIMINATIVE_FILE), to_jsonl(&res.discriminative)?)?;
            write(&out.join(CEG_FILE), to_jsonl(&res.records)?)?;
            print_json(&StageSummary {
                records: res.records.len(),
                generation_calls: res.generation_calls,
                short_calls: res.short_calls,
                backend_calls: session.gateway.calls(),
            })?;
        }
        Command::Adapt {
            seed,
            records,
            discriminative,
            out,
            overrides,
        } => {
            let session = Session::open(load_config(config, overrides)?, &out)?;
            let seed = load(&seed)?;
            let mut all: Vec<GenerationRecord> = Vec::new();
            for path in &records {
                all.extend(read_jsonl::<GenerationRecord>(path)?);
            }
            let mut known: Vec<DiscriminativeText> = Vec::new();
            for path in &discriminative {
                known.extend(read_jsonl::<DiscriminativeText>(path)?);
            }
            let cache = DiscriminativeCache::from_entries(known.iter().cloned());
            let embedder = session.cfg.build_embedder()?;
            let config = AdaptConfig {
                m_shots: session.cfg.m_shots,
            };
            let res = session
                .cfg
                .worker_pool()?
                .install(|| adapt_all(&all, &seed, &config, &session.ctx(), &embedder, &cache))?;
            let on_demand: Vec<DiscriminativeText> = cache.entries().into_iter().filter(|d| !known.contains(d)).collect();
            write(&out.join(ALIGNED_FILE), to_jsonl(&res.records)?)?;
            write(&out.join(CA_DISCRIMINATIVE_FILE), to_jsonl(&on_demand)?)?;
            print_json(&res.summary)?;
        }
        Command::Metrics {
            seed,
            augmented,
            report,
            aligned,
            reference,
            test,
            overrides,
        } => {
            let cfg = load_config(config, overrides)?;
            let embedder = cfg.build_embedder()?;
            let seed = load(&seed)?;
            let augmented = load(&augmented)?;
            let mut out = MetricsReport {
                aps_seed: Some(aps_report(seed.examples(), &embedder, "seed")?),
                aps_augmented: Some(aps_report(augmented.examples(), &embedder, "augmented")?),
                ..MetricsReport::default()
            };
            if let (Some(aligned), Some(reference)) = (aligned, reference) {
                let aligned: Vec<AlignmentRecord> = read_jsonl(&aligned)?;
                let reference = load(&reference)?;
                let labeler = CentroidLabeler::fit(reference.examples(), &embedder)?;
                out.confusion_before = Some(confusion_accounting_phase(&aligned, &labeler, ConfusionPhase::BeforeAdaptation)?);
                out.confusion_after = Some(confusion_accounting_phase(&aligned, &labeler, ConfusionPhase::AfterAdaptation)?);
            }
            if let Some(test) = test.or(cfg.test_path.clone()) {
                let test = load(&test)?;
                let mut train: Vec<LabeledExample> = seed.examples().to_vec();
                out.proxy_seed = Some(nearest_centroid_eval(&train, test.examples(), &embedder)?);
                let seen: std::collections::HashSet<String> = train.iter().map(|e| e.id.clone()).collect();
                train.extend(augmented.examples().iter().filter(|e| !seen.contains(&e.id)).cloned());
                out.proxy_augmented = Some(nearest_centroid_eval(&train, test.examples(), &embedder)?);
            }
            write_json(&report, &out)?;
        }
        Command::Eval {
            train,
            test,
            report,
            overrides,
        } => {
            let cfg = load_config(config, overrides)?;
            let res = nearest_centroid_eval(load(&train)?.examples(), load(&test)?.examples(), &cfg.build_embedder()?)?;
            match report {
                Some(path) => write_json(&path, &res)?,
                None => print_json(&res)?,
            }
        }
        Command::Run {
            input,
            out,
            shots,
            seed,
            overrides,
        } => {
            let mut cfg = load_config(config, overrides)?;
            cfg.shots = shots.unwrap_or(cfg.shots);
            cfg.rng_seed = seed.unwrap_or(cfg.rng_seed);
            cfg.validate()?;
            let manifest = run_full_pipeline(&cfg, &input, &out)?;
            println!(
                "run complete: {} stages, {} backend calls, manifest at {}",
                manifest.stages.len(),
                manifest.backend_calls,
                out.join("manifest.json").display()
            );
        }
        Command::Resume { run_dir, from } => {
            let from: Stage = from.parse()?;
            let manifest = resume_stage(&run_dir, from)?;
            println!(
                "resumed from {from}: {} backend calls in total",
                manifest.backend_calls
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
