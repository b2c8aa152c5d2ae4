//! Stage bodies, usable on their own or through the run orchestrator.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::AlignmentRecord;
use crate::ceg::{run_ceg_for_class, AmbiguousClassSet, CegConfig, ClassSimilarityMatrix, DiscriminativeCache, DiscriminativeText};
use crate::context::GenerationContext;
use crate::corpus::{Dataset, LabeledExample};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::metrics::{
    aps_report, confusion_accounting_phase, nearest_centroid_eval, ApsReport, CentroidLabeler, ConfusionPhase,
    ConfusionReport, ProxyEvalReport,
};
use crate::rng::substream;
use crate::seg::{run_seg_for_class, ClassDescription, GenerationRecord, Method, SegConfig, SparkThought};

/// Classes to augment: `requested`, or every seed class when empty.
pub fn resolve_target_classes(seed: &Dataset, requested: &[String]) -> Result<Vec<String>> {
    if requested.is_empty() {
        return Ok(seed.classes().to_vec());
    }
    if let Some(missing) = requested.iter().find(|c| !seed.has_class(c)) {
        return Err(Error::Config(format!("target class `{missing}` is not in the dataset")));
    }
    Ok(seed
        .classes()
        .iter()
        .filter(|c| requested.contains(c))
        .cloned()
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct SegStageOutput {
    pub descriptions: Vec<ClassDescription>,
    pub sparks: Vec<SparkThought>,
    pub records: Vec<GenerationRecord>,
    pub generation_calls: usize,
    pub short_calls: usize,
    pub spark_shortfall: usize,
}

/// SEG over `classes`, one class per worker; output in class order.
pub fn seg_stage(seed: &Dataset, classes: &[String], config: &SegConfig, ctx: &GenerationContext<'_>) -> Result<SegStageOutput> {
    let per_class: Vec<_> = classes
        .par_iter()
        .map(|class| {
            let seeds: Vec<LabeledExample> = seed.examples_of(class).cloned().collect();
            run_seg_for_class(class, &seeds, config, ctx)
        })
        .collect::<Result<_>>()?;
    let mut out = SegStageOutput::default();
    for c in per_class {
        out.descriptions.extend(c.description);
        out.sparks.extend(c.sparks);
        out.records.extend(c.records);
        out.generation_calls += c.generation_calls;
        out.short_calls += c.short_calls;
        out.spark_shortfall += c.spark_shortfall;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct CegStageOutput {
    pub ambiguous: Vec<AmbiguousClassSet>,
    pub discriminative: Vec<DiscriminativeText>,
    pub records: Vec<GenerationRecord>,
    pub generation_calls: usize,
    pub short_calls: usize,
}

/// CEG over `classes`, one class per worker; output in class order.
pub fn ceg_stage(
    seed: &Dataset,
    classes: &[String],
    sim: &ClassSimilarityMatrix,
    config: &CegConfig,
    ctx: &GenerationContext<'_>,
    cache: &DiscriminativeCache,
) -> Result<CegStageOutput> {
    let per_class: Vec<_> = classes
        .par_iter()
        .map(|class| run_ceg_for_class(class, seed, sim, config, ctx, cache))
        .collect::<Result<_>>()?;
    let mut out = CegStageOutput::default();
    for c in per_class {
        out.ambiguous.push(c.ambiguous);
        out.discriminative.extend(c.discriminative);
        out.records.extend(c.records);
        out.generation_calls += c.generation_calls;
        out.short_calls += c.short_calls;
    }
    Ok(out)
}

fn subsample(records: Vec<&GenerationRecord>, take: usize, rng_seed: u64, class: &str, method: Method) -> Vec<GenerationRecord> {
    if records.len() <= take {
        if records.len() < take {
            log::warn!(
                "class `{class}`: {} has {} records, fewer than its budget share {take}",
                method.as_str(),
                records.len()
            );
        }
        return records.into_iter().cloned().collect();
    }
    let mut rng = substream(rng_seed, &["merge", class, method.as_str()]);
    let mut order: Vec<usize> = (0..records.len()).collect();
    for i in 0..take {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    let mut chosen = order[..take].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| records[i].clone()).collect()
}

/// SEG records followed by CEG records. With a per-class budget, each
/// class keeps at most `budget` records, split evenly over `methods` (the
/// remainder goes to the earlier method) and drawn uniformly without
/// replacement, original order preserved.
pub fn merge_records(
    seg: &[GenerationRecord],
    ceg: &[GenerationRecord],
    classes: &[String],
    methods: &[Method],
    budget: Option<usize>,
    rng_seed: u64,
) -> Vec<GenerationRecord> {
    let Some(budget) = budget else {
        return seg.iter().chain(ceg).cloned().collect();
    };
    let mut active: Vec<Method> = methods.to_vec();
    active.sort();
    active.dedup();
    let mut out = Vec::new();
    for (mi, method) in active.iter().enumerate() {
        let share = budget / active.len() + usize::from(mi < budget % active.len());
        let source = match method {
            Method::Seg => seg,
            Method::Ceg => ceg,
        };
        for class in classes {
            let of_class: Vec<&GenerationRecord> = source.iter().filter(|r| &r.target_class == class).collect();
            out.extend(subsample(of_class, share, rng_seed, class, *method));
        }
    }
    out
}

/// Final training set: adapted texts under their target labels, seeds
/// appended when `include_seeds`.
pub fn export_dataset(seed: &Dataset, aligned: &[AlignmentRecord], include_seeds: bool) -> Result<Dataset> {
    let mut examples: Vec<LabeledExample> = aligned
        .iter()
        .map(|a| LabeledExample::new(a.original.id.clone(), a.final_text.clone(), a.original.target_class.clone()))
        .collect();
    if include_seeds {
        examples.extend(seed.examples().iter().cloned());
    }
    Dataset::with_classes("augmented", seed.classes().to_vec(), examples)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aps_seed: Option<ApsReport>,
    pub aps_augmented: Option<ApsReport>,
    pub confusion_before: Option<ConfusionReport>,
    pub confusion_after: Option<ConfusionReport>,
    pub proxy_seed: Option<ProxyEvalReport>,
    pub proxy_augmented: Option<ProxyEvalReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn note<T>(notes: &mut Vec<String>, what: &str, r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Precondition(msg)) => {
            notes.push(format!("{what}: {msg}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// APS for seed and augmented data, verifier confusion against a
/// nearest-centroid reference fit on `reference_pool`, and proxy accuracy
/// on `test` when given.
pub fn compute_metrics(
    seed: &Dataset,
    aligned: &[AlignmentRecord],
    reference_pool: Option<&Dataset>,
    test: Option<&Dataset>,
    embedder: &Embedder,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    let notes = &mut report.notes;
    let augmented: Vec<LabeledExample> = aligned
        .iter()
        .map(|a| LabeledExample::new(a.original.id.clone(), a.final_text.clone(), a.original.target_class.clone()))
        .collect();
    report.aps_seed = note(notes, "aps_seed", aps_report(seed.examples(), embedder, "seed"))?;
    report.aps_augmented = note(notes, "aps_augmented", aps_report(&augmented, embedder, "augmented"))?;
    match (reference_pool, aligned.is_empty()) {
        (Some(pool), false) => {
            let reference = CentroidLabeler::fit(pool.examples(), embedder)?;
            report.confusion_before = Some(confusion_accounting_phase(aligned, &reference, ConfusionPhase::BeforeAdaptation)?);
            report.confusion_after = Some(confusion_accounting_phase(aligned, &reference, ConfusionPhase::AfterAdaptation)?);
        }
        (None, _) => notes.push("confusion: no reference pool".into()),
        (_, true) => notes.push("confusion: no generated records".into()),
    }
    if let Some(test) = test {
        let mut train: Vec<LabeledExample> = seed.examples().to_vec();
        report.proxy_seed = Some(nearest_centroid_eval(&train, test.examples(), embedder)?);
        train.extend(augmented);
        report.proxy_augmented = Some(nearest_centroid_eval(&train, test.examples(), embedder)?);
    }
    Ok(report)
}

/// Per-class record counts, handy for manifest summaries.
pub fn count_by_class(records: &[GenerationRecord]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.target_class.clone()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg::{SparkOrigin, SparkThought};

    fn rec(method: Method, class: &str, i: usize) -> GenerationRecord {
        GenerationRecord {
            id: GenerationRecord::make_id(method, class, i, 0),
            text: format!("{class} {i}"),
            target_class: class.into(),
            method,
            spark_thought: SparkThought {
                class_name: class.into(),
                text: "s".into(),
                origin: SparkOrigin::Seg { seed_id: "x".into() },
                round: 0,
                index: 0,
            },
            seed_ids: vec![],
            prompt_hash: "h".into(),
            round: i,
            item_index: 0,
            shortfall: false,
        }
    }

    #[test]
    fn merge_without_budget_concatenates() {
        let seg: Vec<_> = (0..3).map(|i| rec(Method::Seg, "a", i)).collect();
        let ceg: Vec<_> = (0..2).map(|i| rec(Method::Ceg, "a", i)).collect();
        let m = merge_records(&seg, &ceg, &["a".into()], &[Method::Seg, Method::Ceg], None, 0);
        assert_eq!(m.len(), 5);
        assert_eq!(m[3].method, Method::Ceg);
    }

    #[test]
    fn merge_budget_splits_evenly_and_is_seeded() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let seg: Vec<_> = classes.iter().flat_map(|c| (0..20).map(move |i| rec(Method::Seg, c, i))).collect();
        let ceg: Vec<_> = classes.iter().flat_map(|c| (0..20).map(move |i| rec(Method::Ceg, c, i))).collect();
        let methods = [Method::Seg, Method::Ceg];
        let m = merge_records(&seg, &ceg, &classes, &methods, Some(7), 3);
        let count = |meth: Method, c: &str| m.iter().filter(|r| r.method == meth && r.target_class == c).count();
        assert_eq!((count(Method::Seg, "a"), count(Method::Ceg, "a")), (4, 3));
        assert_eq!((count(Method::Seg, "b"), count(Method::Ceg, "b")), (4, 3));
        assert_eq!(m, merge_records(&seg, &ceg, &classes, &methods, Some(7), 3));
        let rounds: Vec<usize> = m.iter().filter(|r| r.method == Method::Seg && r.target_class == "a").map(|r| r.round).collect();
        assert!(rounds.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn unknown_target_class_is_config_error() {
        let ds = Dataset::new("d", vec![LabeledExample::new("1", "t", "a")]).unwrap();
        assert!(resolve_target_classes(&ds, &["zz".into()]).unwrap_err().is_config());
        assert_eq!(resolve_target_classes(&ds, &[]).unwrap(), vec!["a".to_string()]);
    }
}
