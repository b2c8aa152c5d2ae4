//! Sentence embeddings, a persistent embedding cache, cosine similarity and
//! top-m retrieval.

mod cache;
mod provider;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Arc;

use rayon::prelude::*;

pub use cache::EmbeddingCache;
pub use provider::{EmbeddingProvider, LocalHashEmbedder, RemoteEmbedder, StaticEmbedder};

use crate::corpus::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    provider_id: Arc<str>,
    model_id: Arc<str>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provider_id: &str, model_id: &str) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Embedding("embedding has zero dimensions".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Embedding(format!("non-finite value at index {i}")));
        }
        Ok(EmbeddingVector {
            values,
            provider_id: provider_id.into(),
            model_id: model_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> EmbeddingVector {
        EmbeddingVector {
            values: self.values.iter().map(|v| v * factor).collect(),
            provider_id: self.provider_id.clone(),
            model_id: self.model_id.clone(),
        }
    }

    pub fn ensure_compatible(&self, other: &EmbeddingVector) -> Result<()> {
        if self.provider_id != other.provider_id
            || self.model_id != other.model_id
            || self.dim() != other.dim()
        {
            return Err(Error::IncompatibleEmbeddings(format!(
                "{}/{}/{} vs {}/{}/{}",
                self.provider_id,
                self.model_id,
                self.dim(),
                other.provider_id,
                other.model_id,
                other.dim()
            )));
        }
        Ok(())
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    a.ensure_compatible(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("zero-norm vector".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Provider access with a content-addressed cache in front.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Arc<EmbeddingCache>,
    batch_size: usize,
    max_attempts: u32,
    fetched_texts: AtomicUsize,
    fetch_calls: AtomicUsize,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("provider", &self.provider.provider_id())
            .field("model", &self.provider.model_id())
            .finish()
    }
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, cache: Arc<EmbeddingCache>) -> Self {
        Embedder {
            provider,
            cache,
            batch_size: 64,
            max_attempts: 3,
            fetched_texts: AtomicUsize::new(0),
            fetch_calls: AtomicUsize::new(0),
        }
    }

    /// Local hashing embedder with an in-memory cache.
    pub fn local() -> Self {
        Self::new(Arc::new(LocalHashEmbedder::default()), Arc::new(EmbeddingCache::in_memory()))
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn with_max_attempts(mut self, attempts: u32) -> Self {
        self.max_attempts = attempts.max(1);
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    /// Number of texts sent to the provider so far (cache misses).
    pub fn fetched_texts(&self) -> usize {
        self.fetched_texts.load(AtomicOrdering::Relaxed)
    }

    /// Number of provider requests so far.
    pub fn fetch_calls(&self) -> usize {
        self.fetch_calls.load(AtomicOrdering::Relaxed)
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_texts(&[text.to_string()])?.remove(0))
    }

    /// Embeds `texts` in order. Each distinct cache miss is fetched once.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::Precondition("no texts to embed".into()));
        }
        let provider_id = self.provider.provider_id();
        let model_id = self.provider.model_id();
        let hashes: Vec<String> = texts.iter().map(sha256_hex).collect();

        let mut resolved: HashMap<&str, Vec<f64>> = HashMap::new();
        let mut misses: Vec<usize> = Vec::new();
        let mut pending: HashSet<&str> = HashSet::new();
        for (i, hash) in hashes.iter().enumerate() {
            if resolved.contains_key(hash.as_str()) || pending.contains(hash.as_str()) {
                continue;
            }
            match self.cache.get(provider_id, model_id, hash) {
                Some(v) => {
                    resolved.insert(hash, v);
                }
                None => {
                    pending.insert(hash);
                    misses.push(i);
                }
            }
        }

        if !misses.is_empty() {
            let batches: Vec<&[usize]> = misses.chunks(self.batch_size).collect();
            let fetched: Vec<Vec<Vec<f64>>> = batches
                .par_iter()
                .map(|batch| self.fetch_batch(texts, batch))
                .collect::<Result<_>>()?;
            for (batch, vectors) in batches.iter().zip(fetched) {
                for (&i, v) in batch.iter().zip(vectors) {
                    self.cache.insert(provider_id, model_id, &hashes[i], v.clone())?;
                    resolved.insert(&hashes[i], v);
                }
            }
        }

        let dim = resolved.values().next().map(Vec::len).unwrap_or(0);
        if let Some(expected) = self.provider.dim() {
            if dim != expected {
                return Err(Error::Embedding(format!(
                    "dimension mismatch: got {dim}, provider declares {expected}"
                )));
            }
        }
        hashes
            .iter()
            .map(|h| {
                let v = resolved[h.as_str()].clone();
                if v.len() != dim {
                    return Err(Error::Embedding(format!(
                        "dimension mismatch between cached ({}) and fresh ({dim}) vectors",
                        v.len()
                    )));
                }
                EmbeddingVector::new(v, provider_id, model_id)
            })
            .collect()
    }

    fn fetch_batch(&self, texts: &[String], batch: &[usize]) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<String> = batch.iter().map(|&i| texts[i].clone()).collect();
        let mut last_err = String::new();
        for attempt in 1..=self.max_attempts {
            self.fetch_calls.fetch_add(1, AtomicOrdering::Relaxed);
            match self.provider.embed_batch(&inputs) {
                Ok(vectors) if vectors.len() == inputs.len() => {
                    self.fetched_texts.fetch_add(inputs.len(), AtomicOrdering::Relaxed);
                    return Ok(vectors);
                }
                Ok(vectors) => {
                    last_err = format!("expected {} vectors, got {}", inputs.len(), vectors.len());
                }
                Err(e) => last_err = e.to_string(),
            }
            log::debug!("embedding attempt {attempt} failed: {last_err}");
        }
        Err(Error::EmbeddingFetch {
            indices: batch.to_vec(),
            message: last_err,
        })
    }
}

/// Pre-embedded retrieval pool.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    examples: Vec<LabeledExample>,
    vectors: Vec<EmbeddingVector>,
}

impl RetrievalIndex {
    pub fn build(pool: &Dataset, embedder: &Embedder) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Precondition("retrieval pool is empty".into()));
        }
        let texts: Vec<String> = pool.examples().iter().map(|e| e.text.clone()).collect();
        let vectors = embedder.embed_texts(&texts)?;
        Ok(RetrievalIndex {
            examples: pool.examples().to_vec(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Top-`m` by cosine, descending; ties by example id ascending.
    pub fn search(&self, query: &EmbeddingVector, m: usize) -> Result<Vec<(LabeledExample, f64)>> {
        if m == 0 {
            return Err(Error::Precondition("m must be at least 1".into()));
        }
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| Ok((i, cosine(query, v)?)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.examples[a.0].id.cmp(&self.examples[b.0].id))
        });
        scored.truncate(m);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.examples[i].clone(), s))
            .collect())
    }
}

/// Top-`m` pool examples by cosine to `query`, descending; ties by id.
pub fn retrieve_similar(
    query: &str,
    pool: &Dataset,
    m: usize,
    embedder: &Embedder,
) -> Result<Vec<(LabeledExample, f64)>> {
    if m == 0 {
        return Err(Error::Precondition("m must be at least 1".into()));
    }
    let index = RetrievalIndex::build(pool, embedder)?;
    index.search(&embedder.embed_one(query)?, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), "test", "m").unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -2.0, 5.0]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        assert!(matches!(
            cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn cosine_rejects_mixed_models() {
        let a = EmbeddingVector::new(vec![1.0], "p", "a").unwrap();
        let b = EmbeddingVector::new(vec![1.0], "p", "b").unwrap();
        assert!(matches!(cosine(&a, &b), Err(Error::IncompatibleEmbeddings(_))));
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(EmbeddingVector::new(vec![f64::NAN], "p", "m").is_err());
    }

    #[test]
    fn duplicate_texts_fetch_once() {
        let emb = Embedder::local();
        let out = emb
            .embed_texts(&["taxi".to_string(), "taxi".to_string()])
            .unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(emb.fetched_texts(), 1);
        emb.embed_texts(&["taxi".to_string()]).unwrap();
        assert_eq!(emb.fetched_texts(), 1);
        assert_eq!(emb.fetch_calls(), 1);
    }

    struct Failing;
    impl EmbeddingProvider for Failing {
        fn provider_id(&self) -> &str {
            "failing"
        }
        fn model_id(&self) -> &str {
            "none"
        }
        fn dim(&self) -> Option<usize> {
            None
        }
        fn embed_batch(&self, _texts: &[String]) -> Result<Vec<Vec<f64>>> {
            Err(Error::Embedding("down".into()))
        }
    }

    #[test]
    fn provider_failure_reports_batch_indices() {
        let emb = Embedder::new(Arc::new(Failing), Arc::new(EmbeddingCache::in_memory()))
            .with_max_attempts(2);
        let err = emb
            .embed_texts(&["a".to_string(), "b".to_string()])
            .unwrap_err();
        match err {
            Error::EmbeddingFetch { indices, .. } => assert_eq!(indices, vec![0, 1]),
            other => panic!("{other}"),
        }
        assert_eq!(emb.fetch_calls(), 2);
    }

    #[test]
    fn self_match_ranks_first() {
        let pool = Dataset::new(
            "p",
            vec![
                LabeledExample::new("a", "book a taxi to the airport", "taxi"),
                LabeledExample::new("b", "what is my balance", "balance"),
                LabeledExample::new("c", "cancel my card", "card"),
            ],
        )
        .unwrap();
        let emb = Embedder::local();
        let hits = retrieve_similar("what is my balance", &pool, 3, &emb).unwrap();
        assert_eq!(hits[0].0.id, "b");
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(hits.len(), 3);
        let all = retrieve_similar("x", &pool, 10, &emb).unwrap();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn taxi_is_closer_to_cab_than_to_noise() {
        use rand::Rng;
        let emb = Embedder::local();
        let naive = |a: &EmbeddingVector, b: &EmbeddingVector| {
            let (a, b) = (a.values(), b.values());
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let taxi = emb.embed_one("taxi").unwrap();
        let cab = emb.embed_one("cab").unwrap();
        let near = cosine(&taxi, &cab).unwrap();
        assert!((near - naive(&taxi, &cab)).abs() < 1e-12);
        let mut rng = crate::rng::substream(3, &["noise"]);
        for _ in 0..20 {
            let noise: String = (0..8).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            let v = emb.embed_one(&noise).unwrap();
            let far = cosine(&taxi, &v).unwrap();
            assert!((far - naive(&taxi, &v)).abs() < 1e-12);
            assert!(near > far, "{noise}: {far} >= {near}");
        }
    }
}
