use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use tardis_core::adapt::{adapt_all, AdaptConfig, AlignmentRecord, Verdict, VerdictStatus};
use tardis_core::ceg::{class_similarity_from_vectors, select_ambiguous_classes, DiscriminativeCache};
use tardis_core::context::GenerationContext;
use tardis_core::corpus::{Dataset, LabeledExample};
use tardis_core::embedding::{cosine, retrieve_similar, Embedder, EmbeddingCache, EmbeddingVector, StaticEmbedder};
use tardis_core::llm::{AuditLog, LlmGateway, MockRule, MockScript, Reply, RetryPolicy, RuleMatch, ScriptedMockBackend};
use tardis_core::metrics::{
    confusion_accounting, inter_class_aps_from_vectors, intra_class_aps_from_vectors, GroundTruthLabeler,
    NearestCentroid,
};
use tardis_core::prompt::builtin_template_set;
use tardis_core::seg::{GenerationRecord, Method, SparkOrigin, SparkThought};

fn ev(values: Vec<f64>) -> EmbeddingVector {
    EmbeddingVector::new(values, "prop", "m").unwrap()
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

/// Labeled vectors over 1..=4 classes of 1..=5 examples each, dim 4.
fn labeled_vectors() -> impl Strategy<Value = Vec<(String, Vec<f64>)>> {
    prop::collection::vec(prop::collection::vec(nonzero_vec(4), 1..=5), 1..=4).prop_map(|classes| {
        classes
            .into_iter()
            .enumerate()
            .flat_map(|(c, vs)| vs.into_iter().map(move |v| (format!("c{c}"), v)))
            .collect()
    })
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

fn record(i: usize, class: &str) -> GenerationRecord {
    GenerationRecord {
        id: format!("r{i:03}"),
        text: format!("text {i} of {class}"),
        target_class: class.into(),
        method: Method::Seg,
        spark_thought: SparkThought {
            class_name: class.into(),
            text: "idea".into(),
            origin: SparkOrigin::Seg { seed_id: "s".into() },
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_is_symmetric_and_scale_invariant(a in nonzero_vec(6), b in nonzero_vec(6), s in 0.01f64..100.0) {
        let (va, vb) = (ev(a), ev(b));
        let ab = cosine(&va, &vb).unwrap();
        prop_assert!((ab - cosine(&vb, &va).unwrap()).abs() < 1e-12);
        prop_assert!((ab - cosine(&va.scaled(s), &vb).unwrap()).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn retrieval_is_sorted_and_ignores_pool_order(
        vecs in prop::collection::vec(nonzero_vec(3), 2..10),
        query in nonzero_vec(3),
        m in 1usize..12,
        rot in 0usize..10,
    ) {
        let entries: Vec<(String, Vec<f64>)> = vecs
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("t{i}"), v.clone()))
            .chain([("query".to_string(), query)])
            .collect();
        let emb = Embedder::new(
            Arc::new(StaticEmbedder::new("prop", entries).unwrap()),
            Arc::new(EmbeddingCache::in_memory()),
        );
        let mut examples: Vec<LabeledExample> =
            (0..vecs.len()).map(|i| LabeledExample::new(format!("e{i:02}"), format!("t{i}"), "a")).collect();
        let pool = Dataset::new("p", examples.clone()).unwrap();
        let hits = retrieve_similar("query", &pool, m, &emb).unwrap();
        prop_assert_eq!(hits.len(), m.min(vecs.len()));
        prop_assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));

        let k = rot % examples.len();
        examples.rotate_left(k);
        let shuffled = Dataset::new("p", examples).unwrap();
        let again = retrieve_similar("query", &shuffled, m, &emb).unwrap();
        let ids = |h: &[(LabeledExample, f64)]| h.iter().map(|(e, _)| e.id.clone()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&hits), ids(&again));
    }

    #[test]
    fn aps_matches_pairwise_oracle(data in labeled_vectors()) {
        let vectors: Vec<EmbeddingVector> = data.iter().map(|(_, v)| ev(v.clone())).collect();
        let labeled: Vec<(&str, &EmbeddingVector)> =
            data.iter().zip(&vectors).map(|((c, _), v)| (c.as_str(), v)).collect();

        let mut by_class: BTreeMap<&str, Vec<&Vec<f64>>> = BTreeMap::new();
        for (c, v) in &data {
            by_class.entry(c.as_str()).or_default().push(v);
        }
        let intra = intra_class_aps_from_vectors(&labeled).unwrap();
        for (c, vs) in &by_class {
            if vs.len() < 2 {
                prop_assert!(!intra.contains_key(*c));
                continue;
            }
            let (mut sum, mut n) = (0.0, 0);
            for i in 0..vs.len() {
                for j in i + 1..vs.len() {
                    sum += naive_cos(vs[i], vs[j]);
                    n += 1;
                }
            }
            prop_assert!((intra[*c] - sum / n as f64).abs() < 1e-9);
        }

        let inter = inter_class_aps_from_vectors(&labeled);
        if by_class.len() < 2 {
            prop_assert!(inter.is_err());
        } else {
            let (mut sum, mut n) = (0.0, 0);
            for i in 0..data.len() {
                for j in i + 1..data.len() {
                    if data[i].0 != data[j].0 {
                        sum += naive_cos(&data[i].1, &data[j].1);
                        n += 1;
                    }
                }
            }
            prop_assert!((inter.unwrap() - sum / n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn selection_ignores_embedding_scale(data in labeled_vectors(), s in 0.01f64..100.0, n in 1usize..5) {
        let classes: Vec<String> = {
            let mut c: Vec<String> = data.iter().map(|(c, _)| c.clone()).collect();
            c.dedup();
            c
        };
        prop_assume!(classes.len() >= 2);
        let plain: Vec<EmbeddingVector> = data.iter().map(|(_, v)| ev(v.clone())).collect();
        let scaled: Vec<EmbeddingVector> = plain.iter().map(|v| v.scaled(s)).collect();
        let pairs = |vs: &'_ [EmbeddingVector]| -> Vec<(String, EmbeddingVector)> {
            data.iter().zip(vs).map(|((c, _), v)| (c.clone(), v.clone())).collect()
        };
        let (p1, p2) = (pairs(&plain), pairs(&scaled));
        let l1: Vec<(&str, &EmbeddingVector)> = p1.iter().map(|(c, v)| (c.as_str(), v)).collect();
        let l2: Vec<(&str, &EmbeddingVector)> = p2.iter().map(|(c, v)| (c.as_str(), v)).collect();
        let m1 = class_similarity_from_vectors(&classes, &l1).unwrap();
        let m2 = class_similarity_from_vectors(&classes, &l2).unwrap();
        for t in &classes {
            let a = select_ambiguous_classes(&m1, t, n).unwrap();
            let b = select_ambiguous_classes(&m2, t, n).unwrap();
            prop_assert_eq!(a.names().collect::<Vec<_>>(), b.names().collect::<Vec<_>>());
            prop_assert!(a.names().all(|c| c != t));
            prop_assert_eq!(a.names().count(), n.min(classes.len() - 1));
        }
    }

    #[test]
    fn nearest_centroid_ignores_scale(data in labeled_vectors(), q in nonzero_vec(4), s in 0.01f64..100.0) {
        let vectors: Vec<EmbeddingVector> = data.iter().map(|(_, v)| ev(v.clone())).collect();
        let labeled: Vec<(&str, &EmbeddingVector)> =
            data.iter().zip(&vectors).map(|((c, _), v)| (c.as_str(), v)).collect();
        let clf = NearestCentroid::fit(&labeled).unwrap();
        let q = ev(q);
        prop_assert_eq!(clf.predict(&q).unwrap(), clf.predict(&q.scaled(s)).unwrap());
    }

    #[test]
    fn confusion_proportions_sum_to_one(rows in prop::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 1..80)) {
        let mut alignments = Vec::new();
        let mut truth = Vec::new();
        for (i, (aligned, agrees, has_verdict)) in rows.iter().enumerate() {
            let rec = record(i, "a");
            truth.push((rec.text.clone(), if *agrees { "a" } else { "b" }.to_string()));
            alignments.push(AlignmentRecord {
                final_text: rec.text.clone(),
                original: rec,
                verdict: has_verdict.then(|| Verdict {
                    status: if *aligned { VerdictStatus::Aligned } else { VerdictStatus::Misaligned },
                    predicted: if *aligned { "a" } else { "b" }.into(),
                    raw_prediction: String::new(),
                }),
                modified_text: None,
                modified: false,
                discriminative_text: None,
                flags: vec![],
            });
        }
        let r = confusion_accounting(&alignments, &GroundTruthLabeler::new(truth)).unwrap();
        prop_assert!((r.proportions.sum() - 1.0).abs() < 1e-9);
        let c = r.counts;
        prop_assert_eq!(c.tp + c.fp + c.fn_ + c.tn, rows.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adaptation_keeps_cardinality_and_labels(misaligned in prop::collection::vec(any::<bool>(), 1..30)) {
        let classes = ["a", "b"];
        let seed = Dataset::new(
            "seed",
            vec![
                LabeledExample::new("a0", "alpha seed", "a"),
                LabeledExample::new("b0", "beta seed", "b"),
            ],
        )
        .unwrap();
        let records: Vec<GenerationRecord> =
            (0..misaligned.len()).map(|i| record(i, classes[i % 2])).collect();
        let mut rules: Vec<MockRule> = records
            .iter()
            .zip(&misaligned)
            .filter(|(_, m)| **m)
            .map(|(r, _)| MockRule {
                matcher: RuleMatch::Tag(format!("^verify/{}/{}$", r.target_class, r.id)),
                reply: Reply::Text(if r.target_class == "a" { "b" } else { "a" }.into()),
            })
            .collect();
        for (re, reply) in [
            ("^verify/", Reply::TagSegment(1)),
            ("^ca_disc/", Reply::Text("they differ".into())),
            ("^modify/", Reply::Enumerate { count: 1, stem: "fixed".into() }),
        ] {
            rules.push(MockRule { matcher: RuleMatch::Tag(re.into()), reply });
        }
        let gateway = LlmGateway::new(
            Arc::new(ScriptedMockBackend::new(MockScript { strict: true, rules, fallback: None }).unwrap()),
            RetryPolicy::no_delay(1),
            Arc::new(AuditLog::in_memory()),
        );
        let templates = builtin_template_set("generic").unwrap();
        let ctx = GenerationContext::new(&gateway, &templates);
        let out = adapt_all(&records, &seed, &AdaptConfig::default(), &ctx, &Embedder::local(), &DiscriminativeCache::new())
            .unwrap();
        prop_assert_eq!(out.records.len(), records.len());
        prop_assert_eq!(out.summary.modified, misaligned.iter().filter(|m| **m).count());
        for ((a, r), m) in out.records.iter().zip(&records).zip(&misaligned) {
            prop_assert_eq!(a.label(), r.target_class.as_str());
            prop_assert_eq!(a.modified, *m);
            if !m {
                prop_assert_eq!(&a.final_text, &r.text);
            }
        }
    }
}
