//! Semantic enrichment generation.
//!
//! Per class: one class description from all seeds, then a batch of spark
//! thoughts (contextualizing ideas) per seed example, then generation calls
//! that each rewrite one seed under one spark thought into `k` new examples.

use serde::{Deserialize, Serialize};

use crate::context::{first_nonempty_line, GenerationContext};
use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::llm::parse_enumerated_items_for_prompt;
use crate::prompt::{Bindings, TemplateId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDescription {
    pub class_name: String,
    pub text: String,
    pub source_seed_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum SparkOrigin {
    Seg { seed_id: String },
    Ceg { contrast: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparkThought {
    pub class_name: String,
    pub text: String,
    pub origin: SparkOrigin,
    pub round: usize,
    /// Position among the thoughts produced by the same call.
    #[serde(default)]
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Seg,
    Ceg,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Seg => "seg",
            Method::Ceg => "ceg",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "seg" => Ok(Method::Seg),
            "ceg" => Ok(Method::Ceg),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// A generated example with its full provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub text: String,
    pub target_class: String,
    pub method: Method,
    pub spark_thought: SparkThought,
    /// Seed examples shown in the prompt, in prompt order.
    pub seed_ids: Vec<String>,
    pub prompt_hash: String,
    pub round: usize,
    pub item_index: usize,
    /// The producing call returned fewer than `k` items.
    pub shortfall: bool,
}

impl GenerationRecord {
    pub fn make_id(method: Method, class: &str, round: usize, item: usize) -> String {
        format!("{}-{class}-{round:03}-{item}", method.as_str())
    }
}

pub fn generate_class_description(
    class: &str,
    seeds: &[LabeledExample],
    ctx: &GenerationContext<'_>,
) -> Result<ClassDescription> {
    if seeds.is_empty() {
        return Err(Error::Precondition(format!("no seeds for class `{class}`")));
    }
    if let Some(bad) = seeds.iter().find(|s| s.label != class) {
        return Err(Error::Precondition(format!(
            "seed `{}` is labeled `{}`, not `{class}`",
            bad.id, bad.label
        )));
    }
    let bindings = Bindings::new()
        .text("target_class_name", class)
        .list("target_seed_data", seeds.iter().map(|s| s.text.clone()));
    let exchange = ctx.ask(TemplateId::ClassDescription, &bindings, format!("desc/{class}/0"))?;
    let text = first_nonempty_line(&exchange.response.raw_text)
        .ok_or_else(|| Error::EmptyResponse(exchange.response.request_tag.clone()))?;
    Ok(ClassDescription {
        class_name: class.to_string(),
        text: text.to_string(),
        source_seed_ids: seeds.iter().map(|s| s.id.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparkOutcome {
    pub thoughts: Vec<SparkThought>,
    /// How many ideas short of the requested number the call came.
    pub shortfall: usize,
}

/// Spark thoughts for one seed. Duplicates are kept as returned.
pub fn generate_spark_thoughts(
    class: &str,
    description: &ClassDescription,
    seed: &LabeledExample,
    ideas_per_seed: usize,
    ctx: &GenerationContext<'_>,
) -> Result<SparkOutcome> {
    if description.class_name != class || seed.label != class {
        return Err(Error::Precondition(format!(
            "description `{}` / seed label `{}` do not match class `{class}`",
            description.class_name, seed.label
        )));
    }
    let bindings = Bindings::new()
        .text("data", class)
        .text("class_description", description.text.clone())
        .text("target_seed_example", seed.text.clone());
    let exchange = ctx.ask(
        TemplateId::ContextualizingText,
        &bindings,
        format!("spark/{class}/{}", seed.id),
    )?;
    let items = parse_enumerated_items_for_prompt(&exchange.response.raw_text, ideas_per_seed, &exchange.prompt);
    if items.is_empty() {
        log::warn!("no spark thoughts parsed for seed `{}`", seed.id);
    }
    let shortfall = ideas_per_seed - items.len();
    let thoughts = items
        .into_iter()
        .enumerate()
        .map(|(index, text)| SparkThought {
            class_name: class.to_string(),
            text,
            origin: SparkOrigin::Seg {
                seed_id: seed.id.clone(),
            },
            round: 0,
            index,
        })
        .collect();
    Ok(SparkOutcome { thoughts, shortfall })
}

/// One generation call: up to `k` rewrites of `seed` under `spark`.
pub fn generate_examples_seg(
    seed: &LabeledExample,
    spark: &SparkThought,
    k: usize,
    round: usize,
    ctx: &GenerationContext<'_>,
) -> Result<Vec<GenerationRecord>> {
    if spark.class_name != seed.label {
        return Err(Error::Precondition(format!(
            "spark thought class `{}` differs from seed label `{}`",
            spark.class_name, seed.label
        )));
    }
    let class = seed.label.as_str();
    let bindings = Bindings::new()
        .text("target_class", class)
        .text("target_seed_example", seed.text.clone())
        .text("contextualizing_text", spark.text.clone());
    let exchange = ctx.ask(TemplateId::SegGenerate, &bindings, format!("seg/{class}/{round}"))?;
    let items = parse_enumerated_items_for_prompt(&exchange.response.raw_text, k, &exchange.prompt);
    let shortfall = items.len() < k;
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(item_index, text)| GenerationRecord {
            id: GenerationRecord::make_id(Method::Seg, class, round, item_index),
            text,
            target_class: class.to_string(),
            method: Method::Seg,
            spark_thought: spark.clone(),
            seed_ids: vec![seed.id.clone()],
            prompt_hash: exchange.prompt_hash.clone(),
            round,
            item_index,
            shortfall,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegConfig {
    pub ideas_per_seed: usize,
    pub k: usize,
    /// Generation calls per class.
    pub rounds: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            ideas_per_seed: 5,
            k: 5,
            rounds: 50,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SegClassOutput {
    pub description: Option<ClassDescription>,
    pub sparks: Vec<SparkThought>,
    pub records: Vec<GenerationRecord>,
    pub generation_calls: usize,
    pub spark_shortfall: usize,
    pub short_calls: usize,
}

/// Full SEG pass for one class.
///
/// Generation rounds walk the (seed, spark thought) pairs round-robin, seed
/// order first, until `rounds` calls have been made. A class whose spark
/// calls all came back empty produces no records.
pub fn run_seg_for_class(
    class: &str,
    seeds: &[LabeledExample],
    config: &SegConfig,
    ctx: &GenerationContext<'_>,
) -> Result<SegClassOutput> {
    let description = generate_class_description(class, seeds, ctx)?;
    let mut out = SegClassOutput::default();
    let mut pairs: Vec<(&LabeledExample, usize)> = Vec::new();
    for seed in seeds {
        let outcome = generate_spark_thoughts(class, &description, seed, config.ideas_per_seed, ctx)?;
        out.spark_shortfall += outcome.shortfall;
        let offset = out.sparks.len();
        pairs.extend((0..outcome.thoughts.len()).map(|i| (seed, offset + i)));
        out.sparks.extend(outcome.thoughts);
    }
    if !pairs.is_empty() {
        for round in 0..config.rounds {
            let (seed, spark_idx) = pairs[round % pairs.len()];
            let records = generate_examples_seg(seed, &out.sparks[spark_idx], config.k, round, ctx)?;
            out.generation_calls += 1;
            if records.len() < config.k {
                out.short_calls += 1;
            }
            out.records.extend(records);
        }
    }
    out.description = Some(description);
    Ok(out)
}
