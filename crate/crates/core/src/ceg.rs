//! Contrastive enrichment generation.
//!
//! Classes are compared by the mean pairwise cosine between their seed
//! embeddings. Each target class is paired with its `n` most similar
//! classes; for every pair the model first states how the two differ, and
//! that discriminative text then conditions generation of examples that sit
//! near the contrast class but belong to the target.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{first_nonempty_line, GenerationContext};
use crate::corpus::{Dataset, LabeledExample};
use crate::embedding::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::llm::parse_enumerated_items_for_prompt;
use crate::prompt::{Bindings, TemplateId};
use crate::rng::{substream, StreamRng};
use crate::seg::{GenerationRecord, Method, SparkOrigin, SparkThought};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSimilarityMatrix {
    pub classes: Vec<String>,
    /// Row-major, `values[i][j] = Sim(classes[i], classes[j])`. The
    /// diagonal holds the mean over distinct intra-class pairs (1.0 for a
    /// singleton class) and is never used for selection.
    pub values: Vec<Vec<f64>>,
    pub provider_id: String,
    pub model_id: String,
}

impl ClassSimilarityMatrix {
    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.values[self.index_of(a)?][self.index_of(b)?])
    }
}

/// Class similarity over a seed dataset, embedding every seed text once.
pub fn class_similarity(seed: &Dataset, embedder: &Embedder) -> Result<ClassSimilarityMatrix> {
    seed.ensure_seed_ready()?;
    let texts: Vec<String> = seed.examples().iter().map(|e| e.text.clone()).collect();
    let vectors = embedder.embed_texts(&texts)?;
    let labeled: Vec<(&str, &EmbeddingVector)> = seed
        .examples()
        .iter()
        .map(|e| e.label.as_str())
        .zip(&vectors)
        .collect();
    class_similarity_from_vectors(seed.classes(), &labeled)
}

fn unit(v: &EmbeddingVector) -> Result<Vec<f64>> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::ZeroNorm("zero-norm seed embedding".into()));
    }
    Ok(v.values().iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Class similarity from pre-computed embeddings.
pub fn class_similarity_from_vectors(
    classes: &[String],
    labeled: &[(&str, &EmbeddingVector)],
) -> Result<ClassSimilarityMatrix> {
    let first = labeled
        .first()
        .ok_or_else(|| Error::Precondition("no embeddings".into()))?
        .1;
    let mut groups: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes.len()];
    for (label, v) in labeled {
        first.ensure_compatible(v)?;
        let idx = classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownClass(label.to_string()))?;
        groups[idx].push(unit(v)?);
    }
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(classes[i].clone()));
    }

    let n = classes.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| {
                    if i == j {
                        intra_mean(&groups[i])
                    } else {
                        let sum: f64 = groups[i]
                            .iter()
                            .flat_map(|a| groups[j].iter().map(move |b| dot(a, b)))
                            .sum();
                        (sum / (groups[i].len() * groups[j].len()) as f64).clamp(-1.0, 1.0)
                    }
                })
                .collect()
        })
        .collect();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = upper[i][j - i];
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(ClassSimilarityMatrix {
        classes: classes.to_vec(),
        values,
        provider_id: first.provider_id().to_string(),
        model_id: first.model_id().to_string(),
    })
}

fn intra_mean(group: &[Vec<f64>]) -> f64 {
    if group.len() < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..group.len() {
        for b in a + 1..group.len() {
            sum += dot(&group[a], &group[b]);
            count += 1;
        }
    }
    (sum / count as f64).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousClassSet {
    pub target: String,
    /// Most similar first.
    pub members: Vec<(String, f64)>,
    pub n: usize,
}

impl AmbiguousClassSet {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|(c, _)| c.as_str())
    }
}

/// The `n` non-target classes most similar to `target`, ties by name.
pub fn select_ambiguous_classes(
    sim: &ClassSimilarityMatrix,
    target: &str,
    n: usize,
) -> Result<AmbiguousClassSet> {
    let t = sim
        .index_of(target)
        .ok_or_else(|| Error::UnknownClass(target.to_string()))?;
    if sim.classes.len() < 2 {
        return Err(Error::Precondition(format!(
            "class `{target}` has no other class to contrast with"
        )));
    }
    if n == 0 {
        return Err(Error::Precondition("n must be at least 1".into()));
    }
    let mut others: Vec<(String, f64)> = sim
        .classes
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(j, c)| (c.clone(), sim.values[t][j]))
        .collect();
    others.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    others.truncate(n);
    Ok(AmbiguousClassSet {
        target: target.to_string(),
        members: others,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminativeText {
    pub target: String,
    pub contrast: String,
    pub text: String,
}

/// Discriminative texts keyed by ordered `(target, contrast)`.
#[derive(Debug, Default)]
pub struct DiscriminativeCache {
    entries: Mutex<BTreeMap<(String, String), DiscriminativeText>>,
}

impl DiscriminativeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = DiscriminativeText>) -> Self {
        let cache = Self::new();
        for e in entries {
            cache.insert(e);
        }
        cache
    }

    pub fn get(&self, target: &str, contrast: &str) -> Option<DiscriminativeText> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&(target.to_string(), contrast.to_string()))
            .cloned()
    }

    pub fn insert(&self, text: DiscriminativeText) {
        self.entries
            .lock()
            .expect("cache lock")
            .insert((text.target.clone(), text.contrast.clone()), text);
    }

    /// All entries in key order.
    pub fn entries(&self) -> Vec<DiscriminativeText> {
        self.entries.lock().expect("cache lock").values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Asks how `target` differs from `contrast`, memoized per ordered pair.
pub fn generate_discriminative_text(
    target: &str,
    target_seeds: &[LabeledExample],
    contrast: &str,
    contrast_seeds: &[LabeledExample],
    ctx: &GenerationContext<'_>,
    cache: &DiscriminativeCache,
) -> Result<DiscriminativeText> {
    discriminative_text_tagged("disc", target, target_seeds, contrast, contrast_seeds, ctx, cache)
}

pub(crate) fn discriminative_text_tagged(
    tag_prefix: &str,
    target: &str,
    target_seeds: &[LabeledExample],
    contrast: &str,
    contrast_seeds: &[LabeledExample],
    ctx: &GenerationContext<'_>,
    cache: &DiscriminativeCache,
) -> Result<DiscriminativeText> {
    if let Some(hit) = cache.get(target, contrast) {
        return Ok(hit);
    }
    if target == contrast {
        return Err(Error::Precondition(format!("cannot contrast `{target}` with itself")));
    }
    if target_seeds.is_empty() || contrast_seeds.is_empty() {
        return Err(Error::Precondition(format!(
            "discriminative text for `{target}` vs `{contrast}` needs seeds for both"
        )));
    }
    let bindings = Bindings::new()
        .text("target_class_name", target)
        .list("target_seed_data", target_seeds.iter().map(|s| s.text.clone()))
        .text("ambiguous_class_name", contrast)
        .list("ambiguous_seed_data", contrast_seeds.iter().map(|s| s.text.clone()));
    let exchange = ctx.ask(
        TemplateId::DiscriminativeText,
        &bindings,
        format!("{tag_prefix}/{target}/{contrast}"),
    )?;
    let text = first_nonempty_line(&exchange.response.raw_text)
        .ok_or_else(|| Error::EmptyResponse(exchange.response.request_tag.clone()))?;
    let disc = DiscriminativeText {
        target: target.to_string(),
        contrast: contrast.to_string(),
        text: text.to_string(),
    };
    cache.insert(disc.clone());
    Ok(disc)
}

/// Drops one or two examples (keeping at least one) and shuffles the rest.
pub fn diversify_prompt_context(seeds: &[LabeledExample], rng: &mut StreamRng) -> Vec<LabeledExample> {
    if seeds.len() <= 1 {
        return seeds.to_vec();
    }
    let remove = rng.gen_range(1..=2usize).min(seeds.len() - 1);
    let mut out = seeds.to_vec();
    out.shuffle(rng);
    out.truncate(seeds.len() - remove);
    out
}

/// One generation call contrasting `target` with `contrast`.
#[allow(clippy::too_many_arguments)]
pub fn generate_examples_ceg(
    target: &str,
    contrast: &str,
    disc: &DiscriminativeText,
    seed: &Dataset,
    k: usize,
    round: usize,
    ctx: &GenerationContext<'_>,
    rng: &mut StreamRng,
) -> Result<Vec<GenerationRecord>> {
    if disc.target != target || disc.contrast != contrast {
        return Err(Error::Precondition(format!(
            "discriminative text is for `{}` vs `{}`, not `{target}` vs `{contrast}`",
            disc.target, disc.contrast
        )));
    }
    let target_seeds: Vec<LabeledExample> = seed.examples_of(target).cloned().collect();
    let contrast_seeds: Vec<LabeledExample> = seed.examples_of(contrast).cloned().collect();
    if target_seeds.is_empty() || contrast_seeds.is_empty() {
        return Err(Error::Precondition(format!("missing seeds for `{target}` or `{contrast}`")));
    }
    let target_ctx = diversify_prompt_context(&target_seeds, rng);
    let contrast_ctx = diversify_prompt_context(&contrast_seeds, rng);
    let bindings = Bindings::new()
        .text("target_class_name", target)
        .list("target_seed_data", target_ctx.iter().map(|s| s.text.clone()))
        .text("ambiguous_class_name", contrast)
        .list("ambiguous_seed_data", contrast_ctx.iter().map(|s| s.text.clone()))
        .text("discriminative_text", disc.text.clone());
    let exchange = ctx.ask(TemplateId::CegGenerate, &bindings, format!("ceg/{target}/{round}"))?;
    let items = parse_enumerated_items_for_prompt(&exchange.response.raw_text, k, &exchange.prompt);
    let shortfall = items.len() < k;
    let spark = SparkThought {
        class_name: target.to_string(),
        text: disc.text.clone(),
        origin: SparkOrigin::Ceg {
            contrast: contrast.to_string(),
        },
        round,
        index: 0,
    };
    let seed_ids: Vec<String> = target_ctx
        .iter()
        .chain(&contrast_ctx)
        .map(|s| s.id.clone())
        .collect();
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(item_index, text)| GenerationRecord {
            id: GenerationRecord::make_id(Method::Ceg, target, round, item_index),
            text,
            target_class: target.to_string(),
            method: Method::Ceg,
            spark_thought: spark.clone(),
            seed_ids: seed_ids.clone(),
            prompt_hash: exchange.prompt_hash.clone(),
            round,
            item_index,
            shortfall,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CegConfig {
    pub n_ambiguous: usize,
    pub k: usize,
    /// Generation calls per class, spread round-robin over the ambiguous set.
    pub rounds: usize,
}

impl Default for CegConfig {
    fn default() -> Self {
        CegConfig {
            n_ambiguous: 5,
            k: 5,
            rounds: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CegClassOutput {
    pub ambiguous: AmbiguousClassSet,
    pub discriminative: Vec<DiscriminativeText>,
    pub records: Vec<GenerationRecord>,
    pub generation_calls: usize,
    pub short_calls: usize,
}

/// Full CEG pass for one class. Round `r` contrasts with ambiguous member
/// `r mod n` and diversifies its prompt with substream `("ceg", class, r)`.
pub fn run_ceg_for_class(
    class: &str,
    seed: &Dataset,
    sim: &ClassSimilarityMatrix,
    config: &CegConfig,
    ctx: &GenerationContext<'_>,
    cache: &DiscriminativeCache,
) -> Result<CegClassOutput> {
    let ambiguous = select_ambiguous_classes(sim, class, config.n_ambiguous)?;
    let target_seeds: Vec<LabeledExample> = seed.examples_of(class).cloned().collect();
    let mut discriminative = Vec::with_capacity(ambiguous.members.len());
    for contrast in ambiguous.names() {
        let contrast_seeds: Vec<LabeledExample> = seed.examples_of(contrast).cloned().collect();
        discriminative.push(generate_discriminative_text(
            class,
            &target_seeds,
            contrast,
            &contrast_seeds,
            ctx,
            cache,
        )?);
    }
    let mut records = Vec::new();
    let mut short_calls = 0;
    for round in 0..config.rounds {
        let member = round % discriminative.len();
        let disc = &discriminative[member];
        let mut rng = substream(ctx.rng_seed, &["ceg", class, &round.to_string()]);
        let out = generate_examples_ceg(class, &disc.contrast, disc, seed, config.k, round, ctx, &mut rng)?;
        if out.len() < config.k {
            short_calls += 1;
        }
        records.extend(out);
    }
    Ok(CegClassOutput {
        ambiguous,
        discriminative,
        records,
        generation_calls: config.rounds,
        short_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{LlmGateway, MockRule, MockScript, Reply, RuleMatch, ScriptedMockBackend};
    use crate::prompt::builtin_template_set;
    use std::sync::Arc;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), "test", "m").unwrap()
    }

    #[test]
    fn identical_singletons_have_similarity_one() {
        let a = v(&[0.2, 0.9]);
        let classes = vec!["a".to_string(), "b".to_string()];
        let sim = class_similarity_from_vectors(&classes, &[("a", &a), ("b", &a)]).unwrap();
        assert!((sim.get("a", "b").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_by_one() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (x, y, d) = (v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[s, s]));
        let classes = vec!["t".to_string(), "c".to_string()];
        let sim = class_similarity_from_vectors(&classes, &[("t", &x), ("t", &y), ("c", &d)]).unwrap();
        assert!((sim.get("t", "c").unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(sim.get("t", "c"), sim.get("c", "t"));
        // Intra-class mean of the single distinct pair (orthogonal).
        assert!(sim.get("t", "t").unwrap().abs() < 1e-12);
    }

    #[test]
    fn missing_class_is_error() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let a = v(&[1.0]);
        assert!(matches!(
            class_similarity_from_vectors(&classes, &[("a", &a)]),
            Err(Error::EmptyClass(_))
        ));
    }

    fn matrix(classes: &[&str], values: Vec<Vec<f64>>) -> ClassSimilarityMatrix {
        ClassSimilarityMatrix {
            classes: classes.iter().map(|c| c.to_string()).collect(),
            values,
            provider_id: "p".into(),
            model_id: "m".into(),
        }
    }

    #[test]
    fn selection_forced_and_exhaustive() {
        let two = matrix(&["a", "b"], vec![vec![1.0, 0.3], vec![0.3, 1.0]]);
        let set = select_ambiguous_classes(&two, "a", 1).unwrap();
        assert_eq!(set.members, vec![("b".to_string(), 0.3)]);

        let three = matrix(
            &["a", "b", "c", "d"],
            vec![
                vec![1.0, 0.2, 0.5, 0.2],
                vec![0.2, 1.0, 0.0, 0.0],
                vec![0.5, 0.0, 1.0, 0.0],
                vec![0.2, 0.0, 0.0, 1.0],
            ],
        );
        let set = select_ambiguous_classes(&three, "a", 5).unwrap();
        let names: Vec<_> = set.names().collect();
        assert_eq!(names, ["c", "b", "d"]);
    }

    #[test]
    fn selection_needs_two_classes() {
        let one = matrix(&["a"], vec![vec![1.0]]);
        assert!(select_ambiguous_classes(&one, "a", 5).is_err());
        assert!(select_ambiguous_classes(&one, "zzz", 5).is_err());
    }

    fn seeds(class: &str, n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| LabeledExample::new(format!("{class}-{i}"), format!("{class} text {i}"), class))
            .collect()
    }

    #[test]
    fn diversify_sizes() {
        let five = seeds("a", 5);
        let mut rng = substream(3, &["t"]);
        for _ in 0..200 {
            let out = diversify_prompt_context(&five, &mut rng);
            assert!(out.len() == 3 || out.len() == 4);
        }
        let two = seeds("a", 2);
        for _ in 0..50 {
            assert_eq!(diversify_prompt_context(&two, &mut rng).len(), 1);
        }
        let one = seeds("a", 1);
        assert_eq!(diversify_prompt_context(&one, &mut rng), one);
    }

    #[test]
    fn diversify_is_deterministic() {
        let five = seeds("a", 5);
        let a = diversify_prompt_context(&five, &mut substream(9, &["x"]));
        let b = diversify_prompt_context(&five, &mut substream(9, &["x"]));
        assert_eq!(a, b);
    }

    fn scripted(rules: Vec<(&str, &str)>) -> LlmGateway {
        LlmGateway::simple(Arc::new(
            ScriptedMockBackend::new(MockScript {
                strict: true,
                rules: rules
                    .into_iter()
                    .map(|(re, text)| MockRule {
                        matcher: RuleMatch::Tag(re.into()),
                        reply: Reply::Text(text.into()),
                    })
                    .collect(),
                fallback: None,
            })
            .unwrap(),
        ))
    }

    #[test]
    fn discriminative_texts_are_memoized_and_ordered() {
        let gw = scripted(vec![
            ("^disc/taxi/ticket$", "Taxi is about cars on demand."),
            ("^disc/ticket/taxi$", "Tickets are about trains and planes."),
        ]);
        let templates = builtin_template_set("banking").unwrap();
        let ctx = GenerationContext::new(&gw, &templates);
        let cache = DiscriminativeCache::new();
        let (t, k) = (seeds("taxi", 2), seeds("ticket", 2));
        let first = generate_discriminative_text("taxi", &t, "ticket", &k, &ctx, &cache).unwrap();
        assert_eq!(first.text, "Taxi is about cars on demand.");
        let again = generate_discriminative_text("taxi", &t, "ticket", &k, &ctx, &cache).unwrap();
        assert_eq!(first, again);
        assert_eq!(gw.calls(), 1);
        let reverse = generate_discriminative_text("ticket", &k, "taxi", &t, &ctx, &cache).unwrap();
        assert_ne!(reverse.text, first.text);
        assert_eq!(gw.calls(), 2);
    }

    fn dataset() -> Dataset {
        let mut exs = seeds("taxi", 5);
        exs.extend(seeds("ticket", 5));
        Dataset::new("d", exs).unwrap()
    }

    #[test]
    fn ceg_records_truncate_and_name_contrast() {
        let gw = scripted(vec![("^ceg/", "1. a\n2. b\n3. c\n4. d\n5. e\n6. f")]);
        let templates = builtin_template_set("banking").unwrap();
        let ctx = GenerationContext::new(&gw, &templates);
        let disc = DiscriminativeText {
            target: "taxi".into(),
            contrast: "ticket".into(),
            text: "differ".into(),
        };
        let mut rng = substream(1, &["ceg", "taxi", "0"]);
        let recs = generate_examples_ceg("taxi", "ticket", &disc, &dataset(), 5, 0, &ctx, &mut rng).unwrap();
        assert_eq!(recs.len(), 5);
        assert!(recs.iter().all(|r| r.method == Method::Ceg
            && r.spark_thought.origin == SparkOrigin::Ceg { contrast: "ticket".into() }));
        assert!(!recs[0].shortfall);
    }

    #[test]
    fn rounds_vary_the_prompt() {
        let gw = scripted(vec![("^ceg/", "1. a")]);
        let templates = builtin_template_set("banking").unwrap();
        let ctx = GenerationContext::new(&gw, &templates);
        let disc = DiscriminativeText {
            target: "taxi".into(),
            contrast: "ticket".into(),
            text: "differ".into(),
        };
        let ds = dataset();
        let hash = |round: usize| {
            let mut rng = substream(1, &["ceg", "taxi", &round.to_string()]);
            generate_examples_ceg("taxi", "ticket", &disc, &ds, 5, round, &ctx, &mut rng).unwrap()[0]
                .prompt_hash
                .clone()
        };
        assert_ne!(hash(0), hash(1));
        assert_eq!(hash(0), hash(0));
    }

    #[test]
    fn mismatched_disc_rejected() {
        let gw = scripted(vec![]);
        let templates = builtin_template_set("banking").unwrap();
        let ctx = GenerationContext::new(&gw, &templates);
        let disc = DiscriminativeText {
            target: "ticket".into(),
            contrast: "taxi".into(),
            text: "x".into(),
        };
        let mut rng = substream(1, &[]);
        assert!(generate_examples_ceg("taxi", "ticket", &disc, &dataset(), 5, 0, &ctx, &mut rng).is_err());
    }
}
