//! Class adaptation: verify each generated example with a few-shot LLM
//! classifier and rewrite the ones that do not land in their target class.
//!
//! Verification shots are the `m` seed examples (from all classes) most
//! similar to the generated text. A record is misaligned when the resolved
//! prediction differs from its target. Misaligned records are rewritten
//! with the target's seeds and the discriminative text for
//! `(target, predicted)`; nothing is ever dropped.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ceg::{discriminative_text_tagged, DiscriminativeCache, DiscriminativeText};
use crate::context::GenerationContext;
use crate::corpus::{Dataset, LabeledExample};
use crate::embedding::{Embedder, RetrievalIndex};
use crate::error::{Error, Result};
use crate::llm::parse_enumerated_items_for_prompt;
use crate::prompt::{Bindings, TemplateId, TemplateSet};
use crate::seg::GenerationRecord;
use crate::OOD_LABEL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationShot {
    pub text: String,
    pub class_name: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Aligned,
    Misaligned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    /// A dataset class or [`OOD_LABEL`].
    pub predicted: String,
    pub raw_prediction: String,
}

impl Verdict {
    pub fn is_aligned(&self) -> bool {
        self.status == VerdictStatus::Aligned
    }

    pub fn is_ood(&self) -> bool {
        self.predicted == OOD_LABEL
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlignmentFlag {
    VerificationFailed { message: String },
    ModificationFailed { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub original: GenerationRecord,
    /// `None` when verification itself failed.
    pub verdict: Option<Verdict>,
    pub modified_text: Option<String>,
    pub final_text: String,
    /// True exactly when a misaligned record was successfully rewritten.
    pub modified: bool,
    /// Discriminative text used for the rewrite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminative_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<AlignmentFlag>,
}

impl AlignmentRecord {
    fn pass_through(original: GenerationRecord, verdict: Option<Verdict>, flags: Vec<AlignmentFlag>) -> Self {
        AlignmentRecord {
            final_text: original.text.clone(),
            original,
            verdict,
            modified_text: None,
            modified: false,
            discriminative_text: None,
            flags,
        }
    }

    pub fn label(&self) -> &str {
        &self.original.target_class
    }

    pub fn modification_failed(&self) -> bool {
        self.flags
            .iter()
            .any(|f| matches!(f, AlignmentFlag::ModificationFailed { .. }))
    }
}

fn shots_block(shots: &[VerificationShot]) -> String {
    shots
        .iter()
        .map(|s| format!("text: {} class: {}", s.text, s.class_name))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Verification prompt over the `m` seeds most similar to `example`.
pub fn build_verification_prompt(
    example: &str,
    seed: &Dataset,
    m: usize,
    embedder: &Embedder,
    templates: &TemplateSet,
) -> Result<(String, Vec<VerificationShot>)> {
    let index = RetrievalIndex::build(seed, embedder)?;
    verification_prompt_from_index(example, &index, m, embedder, templates)
}

pub fn verification_prompt_from_index(
    example: &str,
    index: &RetrievalIndex,
    m: usize,
    embedder: &Embedder,
    templates: &TemplateSet,
) -> Result<(String, Vec<VerificationShot>)> {
    let query = embedder.embed_one(example)?;
    let shots: Vec<VerificationShot> = index
        .search(&query, m)?
        .into_iter()
        .map(|(ex, similarity)| VerificationShot {
            text: ex.text,
            class_name: ex.label,
            similarity,
        })
        .collect();
    let bindings = Bindings::new()
        .text("verification_shots", shots_block(&shots))
        .text("target_text", example);
    Ok((templates.render(TemplateId::Verification, &bindings)?, shots))
}

/// Maps a raw verifier answer onto a class name or [`OOD_LABEL`].
///
/// Only the first line counts. Tried in order: exact match, case-insensitive
/// match, then a unique class that is a case-insensitive prefix of the line
/// or has the line as its prefix.
pub fn resolve_predicted_class(raw: &str, classes: &[String]) -> String {
    let line = raw.lines().next().unwrap_or("").trim();
    if line.is_empty() {
        return OOD_LABEL.to_string();
    }
    if let Some(c) = classes.iter().find(|c| c.as_str() == line) {
        return c.clone();
    }
    let lower = line.to_lowercase();
    if let Some(c) = classes.iter().find(|c| c.to_lowercase() == lower) {
        return c.clone();
    }
    let prefixed: Vec<&String> = classes
        .iter()
        .filter(|c| {
            let cl = c.to_lowercase();
            lower.starts_with(&cl) || cl.starts_with(&lower)
        })
        .collect();
    match prefixed.as_slice() {
        [only] => (*only).clone(),
        _ => OOD_LABEL.to_string(),
    }
}

fn verify_with_index(
    rec: &GenerationRecord,
    classes: &[String],
    index: &RetrievalIndex,
    m: usize,
    ctx: &GenerationContext<'_>,
    embedder: &Embedder,
) -> Result<Verdict> {
    if !classes.contains(&rec.target_class) {
        return Err(Error::UnknownClass(rec.target_class.clone()));
    }
    let (prompt, _) = verification_prompt_from_index(&rec.text, index, m, embedder, ctx.templates)?;
    let exchange = ctx.send(prompt, format!("verify/{}/{}", rec.target_class, rec.id))?;
    let raw = exchange.response.raw_text;
    let predicted = resolve_predicted_class(&raw, classes);
    let status = if predicted == rec.target_class {
        VerdictStatus::Aligned
    } else {
        VerdictStatus::Misaligned
    };
    Ok(Verdict {
        status,
        predicted,
        raw_prediction: raw,
    })
}

/// One verifier call for `rec`.
pub fn verify_example(
    rec: &GenerationRecord,
    seed: &Dataset,
    m: usize,
    ctx: &GenerationContext<'_>,
    embedder: &Embedder,
) -> Result<Verdict> {
    let index = RetrievalIndex::build(seed, embedder)?;
    verify_with_index(rec, seed.classes(), &index, m, ctx, embedder)
}

/// Framing used in place of a model-written discriminative text when the
/// verifier found no matching class.
pub fn ood_discriminative_text(target: &str) -> DiscriminativeText {
    DiscriminativeText {
        target: target.to_string(),
        contrast: OOD_LABEL.to_string(),
        text: format!(
            "The text does not fit any known class; rewrite it as a complete request that clearly belongs to {target}."
        ),
    }
}

/// Looks up (or creates on demand) the discriminative text for
/// `(target, predicted)`.
pub fn discriminative_for(
    target: &str,
    predicted: &str,
    seed: &Dataset,
    cache: &DiscriminativeCache,
    ctx: &GenerationContext<'_>,
) -> Result<DiscriminativeText> {
    if let Some(hit) = cache.get(target, predicted) {
        return Ok(hit);
    }
    if predicted == OOD_LABEL {
        let disc = ood_discriminative_text(target);
        cache.insert(disc.clone());
        return Ok(disc);
    }
    let target_seeds: Vec<LabeledExample> = seed.examples_of(target).cloned().collect();
    let contrast_seeds: Vec<LabeledExample> = seed.examples_of(predicted).cloned().collect();
    discriminative_text_tagged("ca_disc", target, &target_seeds, predicted, &contrast_seeds, ctx, cache)
}

/// Rewrites a misaligned record toward its target class.
pub fn modify_example(
    rec: &GenerationRecord,
    verdict: &Verdict,
    seed: &Dataset,
    cache: &DiscriminativeCache,
    ctx: &GenerationContext<'_>,
) -> Result<AlignmentRecord> {
    if verdict.is_aligned() {
        return Err(Error::Precondition(format!(
            "record `{}` is aligned; only misaligned records are modified",
            rec.id
        )));
    }
    let target = rec.target_class.as_str();
    let disc = discriminative_for(target, &verdict.predicted, seed, cache, ctx)?;
    let predicted_label = if verdict.is_ood() {
        "out-of-domain"
    } else {
        verdict.predicted.as_str()
    };
    let bindings = Bindings::new()
        .text("target_class", target)
        .list("target_class_data", seed.examples_of(target).map(|s| s.text.clone()))
        .text("discriminative_text", disc.text.clone())
        .text("verification_result_class", predicted_label)
        .text("generated_example", rec.text.clone());
    let exchange = ctx.ask(TemplateId::Modification, &bindings, format!("modify/{target}/{}", rec.id))?;
    let rewritten = parse_enumerated_items_for_prompt(&exchange.response.raw_text, 1, &exchange.prompt)
        .into_iter()
        .next();
    Ok(match rewritten {
        Some(text) => AlignmentRecord {
            original: rec.clone(),
            verdict: Some(verdict.clone()),
            modified_text: Some(text.clone()),
            final_text: text,
            modified: true,
            discriminative_text: Some(disc.text),
            flags: Vec::new(),
        },
        None => {
            log::warn!("modification of `{}` returned nothing; keeping original text", rec.id);
            let mut out = AlignmentRecord::pass_through(
                rec.clone(),
                Some(verdict.clone()),
                vec![AlignmentFlag::ModificationFailed {
                    message: "empty modification output".into(),
                }],
            );
            out.discriminative_text = Some(disc.text);
            out
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Retrieved verification shots.
    pub m_shots: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { m_shots: 10 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub aligned: usize,
    pub misaligned: usize,
    pub modified: usize,
    pub modification_failed: usize,
    pub verification_failed: usize,
    /// Discriminative texts created during adaptation (not reused from CEG).
    pub on_demand_discriminative: usize,
}

#[derive(Debug, Clone)]
pub struct AdaptOutput {
    pub records: Vec<AlignmentRecord>,
    pub summary: AdaptSummary,
}

/// Verifies every record and rewrites the misaligned ones.
///
/// Output order and length equal the input's. Per-record backend failures
/// are flagged on the record and the run continues. Missing discriminative
/// texts are created in sorted `(target, predicted)` order between the
/// verification and modification passes, so the set of backend calls does
/// not depend on scheduling.
pub fn adapt_all(
    records: &[GenerationRecord],
    seed: &Dataset,
    config: &AdaptConfig,
    ctx: &GenerationContext<'_>,
    embedder: &Embedder,
    cache: &DiscriminativeCache,
) -> Result<AdaptOutput> {
    if records.is_empty() {
        return Ok(AdaptOutput {
            records: Vec::new(),
            summary: AdaptSummary::default(),
        });
    }
    let index = RetrievalIndex::build(seed, embedder)?;
    let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
    embedder.embed_texts(&texts)?;

    let verdicts: Vec<std::result::Result<Verdict, String>> = records
        .par_iter()
        .map(|rec| {
            verify_with_index(rec, seed.classes(), &index, config.m_shots, ctx, embedder).map_err(|e| {
                log::warn!("verification of `{}` failed: {e}", rec.id);
                e.to_string()
            })
        })
        .collect();

    let needed: BTreeSet<(String, String)> = records
        .iter()
        .zip(&verdicts)
        .filter_map(|(rec, v)| match v {
            Ok(v) if !v.is_aligned() => Some((rec.target_class.clone(), v.predicted.clone())),
            _ => None,
        })
        .collect();
    let mut on_demand = 0;
    let mut disc_errors = std::collections::BTreeMap::new();
    for (target, predicted) in &needed {
        if cache.get(target, predicted).is_some() {
            continue;
        }
        match discriminative_for(target, predicted, seed, cache, ctx) {
            Ok(_) => on_demand += 1,
            Err(e) => {
                disc_errors.insert((target.clone(), predicted.clone()), e.to_string());
            }
        }
    }

    let out: Vec<AlignmentRecord> = records
        .par_iter()
        .zip(verdicts.into_par_iter())
        .map(|(rec, verdict)| match verdict {
            Err(message) => AlignmentRecord::pass_through(
                rec.clone(),
                None,
                vec![AlignmentFlag::VerificationFailed { message }],
            ),
            Ok(v) if v.is_aligned() => AlignmentRecord::pass_through(rec.clone(), Some(v), Vec::new()),
            Ok(v) => {
                let key = (rec.target_class.clone(), v.predicted.clone());
                if let Some(message) = disc_errors.get(&key) {
                    return AlignmentRecord::pass_through(
                        rec.clone(),
                        Some(v),
                        vec![AlignmentFlag::ModificationFailed {
                            message: message.clone(),
                        }],
                    );
                }
                modify_example(rec, &v, seed, cache, ctx).unwrap_or_else(|e| {
                    log::warn!("modification of `{}` failed: {e}", rec.id);
                    AlignmentRecord::pass_through(
                        rec.clone(),
                        Some(v),
                        vec![AlignmentFlag::ModificationFailed { message: e.to_string() }],
                    )
                })
            }
        })
        .collect();

    let mut summary = AdaptSummary {
        on_demand_discriminative: on_demand,
        ..AdaptSummary::default()
    };
    for r in &out {
        match &r.verdict {
            None => summary.verification_failed += 1,
            Some(v) if v.is_aligned() => summary.aligned += 1,
            Some(_) => summary.misaligned += 1,
        }
        if r.modified {
            summary.modified += 1;
        }
        if r.modification_failed() {
            summary.modification_failed += 1;
        }
    }
    Ok(AdaptOutput { records: out, summary })
}
