//! Diversity and separability (APS), verifier confusion accounting and a
//! nearest-centroid proxy classifier.
//!
//! APS sums use the identity `sum_{i<j} u_i.u_j = (|sum u|^2 - sum |u_i|^2) / 2`
//! over unit vectors, so every pair is counted exactly in O(n * dim) and no
//! pair sampling is needed even for large augmented sets.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::adapt::AlignmentRecord;
use crate::corpus::LabeledExample;
use crate::embedding::{cosine, Embedder, EmbeddingVector};
use crate::error::{Error, Result};

fn unit(v: &EmbeddingVector) -> Result<Vec<f64>> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::ZeroNorm("cannot normalize a zero embedding".into()));
    }
    Ok(v.values().iter().map(|x| x / n).collect())
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Per-class running sums of unit vectors.
struct ClassSums {
    sum: Vec<f64>,
    sq_norms: f64,
    count: usize,
}

fn class_sums(labeled: &[(&str, &EmbeddingVector)]) -> Result<BTreeMap<String, ClassSums>> {
    let Some((_, first)) = labeled.first() else {
        return Ok(BTreeMap::new());
    };
    let dim = first.dim();
    let mut out: BTreeMap<String, ClassSums> = BTreeMap::new();
    for (label, v) in labeled {
        first.ensure_compatible(v)?;
        let u = unit(v)?;
        let entry = out.entry(label.to_string()).or_insert_with(|| ClassSums {
            sum: vec![0.0; dim],
            sq_norms: 0.0,
            count: 0,
        });
        entry.sq_norms += sq(&u);
        add_into(&mut entry.sum, &u);
        entry.count += 1;
    }
    Ok(out)
}

/// Mean pairwise cosine within each class. Classes with fewer than two
/// examples are left out with a warning.
pub fn intra_class_aps_from_vectors(labeled: &[(&str, &EmbeddingVector)]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (class, s) in class_sums(labeled)? {
        if s.count < 2 {
            log::warn!("class `{class}` has {} example(s); excluded from intra-class APS", s.count);
            continue;
        }
        let pairs = (s.count * (s.count - 1)) as f64;
        out.insert(class, ((sq(&s.sum) - s.sq_norms) / pairs).clamp(-1.0, 1.0));
    }
    Ok(out)
}

/// Mean cosine over every pair of examples with different labels.
pub fn inter_class_aps_from_vectors(labeled: &[(&str, &EmbeddingVector)]) -> Result<f64> {
    let sums = class_sums(labeled)?;
    if sums.len() < 2 {
        return Err(Error::Precondition(format!(
            "inter-class APS needs at least 2 classes, got {}",
            sums.len()
        )));
    }
    let dim = sums.values().next().map_or(0, |s| s.sum.len());
    let mut total = vec![0.0; dim];
    let mut within = 0.0;
    let mut n = 0usize;
    let mut n_sq = 0usize;
    for s in sums.values() {
        add_into(&mut total, &s.sum);
        within += sq(&s.sum);
        n += s.count;
        n_sq += s.count * s.count;
    }
    let pairs = (n * n - n_sq) as f64;
    Ok(((sq(&total) - within) / pairs).clamp(-1.0, 1.0))
}

fn embed_labeled(examples: &[LabeledExample], embedder: &Embedder) -> Result<Vec<EmbeddingVector>> {
    let texts: Vec<String> = examples.iter().map(|e| e.text.clone()).collect();
    embedder.embed_texts(&texts)
}

fn pair_up<'a>(examples: &'a [LabeledExample], vectors: &'a [EmbeddingVector]) -> Vec<(&'a str, &'a EmbeddingVector)> {
    examples.iter().map(|e| e.label.as_str()).zip(vectors).collect()
}

pub fn intra_class_aps(examples: &[LabeledExample], embedder: &Embedder) -> Result<BTreeMap<String, f64>> {
    let vectors = embed_labeled(examples, embedder)?;
    intra_class_aps_from_vectors(&pair_up(examples, &vectors))
}

pub fn inter_class_aps(examples: &[LabeledExample], embedder: &Embedder) -> Result<f64> {
    let vectors = embed_labeled(examples, embedder)?;
    inter_class_aps_from_vectors(&pair_up(examples, &vectors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApsReport {
    pub per_class_intra: BTreeMap<String, f64>,
    /// Mean over classes with at least two examples.
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub dataset_tag: String,
    /// Always "exact": every pair contributes.
    pub pair_coverage: String,
}

pub fn aps_report(examples: &[LabeledExample], embedder: &Embedder, dataset_tag: &str) -> Result<ApsReport> {
    let vectors = embed_labeled(examples, embedder)?;
    let labeled = pair_up(examples, &vectors);
    let per_class_intra = intra_class_aps_from_vectors(&labeled)?;
    if per_class_intra.is_empty() {
        return Err(Error::Precondition(format!(
            "`{dataset_tag}`: no class has two or more examples"
        )));
    }
    let intra_mean = per_class_intra.values().sum::<f64>() / per_class_intra.len() as f64;
    Ok(ApsReport {
        intra_mean,
        inter_mean: inter_class_aps_from_vectors(&labeled)?,
        per_class_intra,
        dataset_tag: dataset_tag.to_string(),
        pair_coverage: "exact".into(),
    })
}

/// Independent judge of which class a text belongs to.
pub trait ReferenceLabeler: Sync {
    fn label(&self, text: &str) -> Result<String>;

    fn label_all(&self, texts: &[String]) -> Result<Vec<String>> {
        texts.iter().map(|t| self.label(t)).collect()
    }
}

/// Looks texts up in a known text-to-label table.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthLabeler {
    table: HashMap<String, String>,
}

impl GroundTruthLabeler {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        GroundTruthLabeler {
            table: pairs.into_iter().collect(),
        }
    }
}

impl ReferenceLabeler for GroundTruthLabeler {
    fn label(&self, text: &str) -> Result<String> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Precondition(format!("reference has no label for `{text}`")))
    }
}

/// Nearest-centroid classifier used as a reference labeler.
pub struct CentroidLabeler<'a> {
    model: NearestCentroid,
    embedder: &'a Embedder,
}

impl<'a> CentroidLabeler<'a> {
    pub fn fit(train: &[LabeledExample], embedder: &'a Embedder) -> Result<Self> {
        let vectors = embed_labeled(train, embedder)?;
        Ok(CentroidLabeler {
            model: NearestCentroid::fit(&pair_up(train, &vectors))?,
            embedder,
        })
    }
}

impl ReferenceLabeler for CentroidLabeler<'_> {
    fn label(&self, text: &str) -> Result<String> {
        self.model.predict(&self.embedder.embed_one(text)?)
    }

    fn label_all(&self, texts: &[String]) -> Result<Vec<String>> {
        self.embedder
            .embed_texts(texts)?
            .iter()
            .map(|v| self.model.predict(v))
            .collect()
    }
}

/// Which text the reference judges: the generated one or the one after CA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionPhase {
    BeforeAdaptation,
    AfterAdaptation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "TP")]
    pub tp: usize,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
    #[serde(rename = "TN")]
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionProportions {
    #[serde(rename = "TP")]
    pub tp: f64,
    #[serde(rename = "FP")]
    pub fp: f64,
    #[serde(rename = "FN")]
    pub fn_: f64,
    #[serde(rename = "TN")]
    pub tn: f64,
}

impl ConfusionProportions {
    pub fn sum(&self) -> f64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub proportions: ConfusionProportions,
    pub counts: ConfusionCounts,
    pub total: usize,
}

/// Confusion of the verifier's verdicts against `reference`, which judges
/// each record's `final_text`.
///
/// Positive means the verifier judged the record aligned; a record whose
/// verification failed counts as not aligned. Truth is whether the
/// reference's label equals the target class.
pub fn confusion_accounting(alignments: &[AlignmentRecord], reference: &dyn ReferenceLabeler) -> Result<ConfusionReport> {
    let texts: Vec<String> = alignments.iter().map(|a| a.final_text.clone()).collect();
    tally(alignments, &texts, reference, |a| a.verdict.as_ref().is_some_and(|v| v.is_aligned()))
}

/// Confusion before or after adaptation. Before, the reference judges the
/// generated text. After, it judges `final_text` and a successfully
/// modified record counts as positive alongside the verifier-aligned ones.
pub fn confusion_accounting_phase(
    alignments: &[AlignmentRecord],
    reference: &dyn ReferenceLabeler,
    phase: ConfusionPhase,
) -> Result<ConfusionReport> {
    match phase {
        ConfusionPhase::BeforeAdaptation => {
            let texts: Vec<String> = alignments.iter().map(|a| a.original.text.clone()).collect();
            tally(alignments, &texts, reference, |a| a.verdict.as_ref().is_some_and(|v| v.is_aligned()))
        }
        ConfusionPhase::AfterAdaptation => {
            let texts: Vec<String> = alignments.iter().map(|a| a.final_text.clone()).collect();
            tally(alignments, &texts, reference, |a| {
                a.modified || a.verdict.as_ref().is_some_and(|v| v.is_aligned())
            })
        }
    }
}

fn tally(
    alignments: &[AlignmentRecord],
    texts: &[String],
    reference: &dyn ReferenceLabeler,
    positive: impl Fn(&AlignmentRecord) -> bool,
) -> Result<ConfusionReport> {
    if alignments.is_empty() {
        return Err(Error::Precondition("confusion accounting over zero records".into()));
    }
    let labels = reference.label_all(texts)?;
    let mut counts = ConfusionCounts::default();
    for (a, reference_label) in alignments.iter().zip(&labels) {
        let reference_agrees = reference_label == &a.original.target_class;
        match (positive(a), reference_agrees) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => counts.tn += 1,
        }
    }
    let total = alignments.len();
    let p = |c: usize| c as f64 / total as f64;
    Ok(ConfusionReport {
        proportions: ConfusionProportions {
            tp: p(counts.tp),
            fp: p(counts.fp),
            fn_: p(counts.fn_),
            tn: p(counts.tn),
        },
        counts,
        total,
    })
}

/// Class centroids in embedding space; prediction is the centroid with the
/// highest cosine, ties going to the smaller class name.
#[derive(Debug, Clone)]
pub struct NearestCentroid {
    centroids: BTreeMap<String, EmbeddingVector>,
}

impl NearestCentroid {
    pub fn fit(train: &[(&str, &EmbeddingVector)]) -> Result<Self> {
        let (_, first) = train
            .first()
            .ok_or_else(|| Error::Precondition("nearest-centroid needs training data".into()))?;
        let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for (label, v) in train {
            first.ensure_compatible(v)?;
            let entry = sums.entry(label).or_insert_with(|| (vec![0.0; first.dim()], 0));
            add_into(&mut entry.0, v.values());
            entry.1 += 1;
        }
        let centroids = sums
            .into_iter()
            .map(|(label, (sum, n))| {
                let mean = sum.into_iter().map(|x| x / n as f64).collect();
                Ok((
                    label.to_string(),
                    EmbeddingVector::new(mean, first.provider_id(), first.model_id())?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(NearestCentroid { centroids })
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.centroids.keys().map(String::as_str)
    }

    pub fn has_class(&self, class: &str) -> bool {
        self.centroids.contains_key(class)
    }

    pub fn predict(&self, v: &EmbeddingVector) -> Result<String> {
        let mut best: Option<(&str, f64)> = None;
        for (class, c) in &self.centroids {
            let s = cosine(v, c)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((class, s));
            }
        }
        Ok(best.map(|(c, _)| c.to_string()).unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyEvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: BTreeMap<String, f64>,
    pub n_test: usize,
    pub classifier: String,
}

pub fn nearest_centroid_eval_vectors(
    train: &[(&str, &EmbeddingVector)],
    test: &[(&str, &EmbeddingVector)],
) -> Result<ProxyEvalReport> {
    if test.is_empty() {
        return Err(Error::Precondition("empty test set".into()));
    }
    let model = NearestCentroid::fit(train)?;
    if let Some((label, _)) = test.iter().find(|(l, _)| !model.has_class(l)) {
        return Err(Error::UnknownClass(label.to_string()));
    }
    let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    for (label, v) in test {
        let hit = model.predict(v)? == *label;
        let entry = per_class.entry(label.to_string()).or_default();
        entry.1 += 1;
        if hit {
            entry.0 += 1;
            correct += 1;
        }
    }
    Ok(ProxyEvalReport {
        accuracy: correct as f64 / test.len() as f64,
        per_class_accuracy: per_class
            .into_iter()
            .map(|(c, (ok, n))| (c, ok as f64 / n as f64))
            .collect(),
        n_test: test.len(),
        classifier: "nearest-centroid".into(),
    })
}

pub fn nearest_centroid_eval(
    train: &[LabeledExample],
    test: &[LabeledExample],
    embedder: &Embedder,
) -> Result<ProxyEvalReport> {
    if test.is_empty() {
        return Err(Error::Precondition("empty test set".into()));
    }
    let train_vecs = embed_labeled(train, embedder)?;
    let test_vecs = embed_labeled(test, embedder)?;
    nearest_centroid_eval_vectors(&pair_up(train, &train_vecs), &pair_up(test, &test_vecs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), "t", "m").unwrap()
    }

    fn brute_cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    #[test]
    fn identical_pair_is_one() {
        let v = ev(&[0.3, 0.4, 0.0]);
        let got = intra_class_aps_from_vectors(&[("a", &v), ("a", &v)]).unwrap();
        assert!((got["a"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_vectors_match_pairwise_mean() {
        let vs = [ev(&[1.0, 0.0, 0.0]), ev(&[1.0, 1.0, 0.0]), ev(&[0.2, -1.0, 3.0])];
        let labeled: Vec<_> = vs.iter().map(|v| ("a", v)).collect();
        let got = intra_class_aps_from_vectors(&labeled).unwrap()["a"];
        let v: Vec<&[f64]> = vs.iter().map(|v| v.values()).collect();
        let want = (brute_cos(v[0], v[1]) + brute_cos(v[0], v[2]) + brute_cos(v[1], v[2])) / 3.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn singleton_classes_are_excluded() {
        let a = ev(&[1.0, 0.0]);
        let got = intra_class_aps_from_vectors(&[("a", &a), ("b", &a), ("b", &a)]).unwrap();
        assert_eq!(got.keys().collect::<Vec<_>>(), vec!["b"]);
    }

    #[test]
    fn orthogonal_classes_have_zero_inter() {
        let a = ev(&[1.0, 0.0]);
        let b = ev(&[0.0, 2.0]);
        let got = inter_class_aps_from_vectors(&[("a", &a), ("a", &a), ("b", &b)]).unwrap();
        assert!(got.abs() < 1e-12);
        assert!(inter_class_aps_from_vectors(&[("a", &a), ("a", &a)]).is_err());
    }

    #[test]
    fn zero_vector_is_rejected() {
        let z = EmbeddingVector::new(vec![0.0, 0.0], "t", "m").unwrap();
        let a = ev(&[1.0, 0.0]);
        assert!(matches!(
            intra_class_aps_from_vectors(&[("a", &a), ("a", &z)]),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn centroid_ties_go_to_smaller_name() {
        let a = ev(&[1.0, 0.0]);
        let b = ev(&[0.0, 1.0]);
        let model = NearestCentroid::fit(&[("zeta", &a), ("alpha", &b)]).unwrap();
        assert_eq!(model.predict(&ev(&[1.0, 1.0])).unwrap(), "alpha");
        assert_eq!(model.predict(&ev(&[2.0, 1.0])).unwrap(), "zeta");
    }

    #[test]
    fn eval_rejects_unknown_and_empty() {
        let a = ev(&[1.0, 0.0]);
        assert!(nearest_centroid_eval_vectors(&[("a", &a)], &[]).is_err());
        assert!(matches!(
            nearest_centroid_eval_vectors(&[("a", &a)], &[("b", &a)]),
            Err(Error::UnknownClass(_))
        ));
        let r = nearest_centroid_eval_vectors(&[("a", &a)], &[("a", &a)]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.classifier, "nearest-centroid");
    }
}
