use std::collections::HashMap;
use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::hashing::fnv1a64;

/// A source of sentence embeddings.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model_id(&self) -> &str;
    /// Declared dimensionality, when known up front.
    fn dim(&self) -> Option<usize>;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Character n-gram feature hashing, L2-normalized.
///
/// Texts are lowercased and padded with one space on each side before
/// n-grams are extracted, so word boundaries contribute features. Each
/// n-gram adds 1 to bucket `fnv1a64(ngram) % dim`.
#[derive(Debug, Clone)]
pub struct LocalHashEmbedder {
    dim: usize,
    n: usize,
    model_id: String,
}

impl Default for LocalHashEmbedder {
    fn default() -> Self {
        Self::new(256, 3)
    }
}

impl LocalHashEmbedder {
    pub fn new(dim: usize, n: usize) -> Self {
        assert!(dim > 0 && n > 0);
        LocalHashEmbedder {
            dim,
            n,
            model_id: format!("char{n}-hash{dim}"),
        }
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let padded: Vec<char> = std::iter::once(' ')
            .chain(text.to_lowercase().chars())
            .chain(std::iter::once(' '))
            .collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = String::new();
        for gram in padded.windows(self.n) {
            buf.clear();
            buf.extend(gram);
            let bucket = (fnv1a64(buf.as_bytes()) % self.dim as u64) as usize;
            v[bucket] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for LocalHashEmbedder {
    fn provider_id(&self) -> &str {
        "local"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

/// Fixed text-to-vector table; unknown texts are an error.
#[derive(Debug, Clone)]
pub struct StaticEmbedder {
    table: HashMap<String, Vec<f64>>,
    dim: usize,
    model_id: String,
}

impl StaticEmbedder {
    pub fn new(model_id: impl Into<String>, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let table: HashMap<String, Vec<f64>> = entries.into_iter().collect();
        let dim = table.values().next().map(Vec::len).unwrap_or(0);
        if dim == 0 || table.values().any(|v| v.len() != dim) {
            return Err(Error::Embedding("static table needs equal, non-zero dimensions".into()));
        }
        Ok(StaticEmbedder {
            table,
            dim,
            model_id: model_id.into(),
        })
    }
}

impl EmbeddingProvider for StaticEmbedder {
    fn provider_id(&self) -> &str {
        "static"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::Embedding(format!("no static vector for `{t}`")))
            })
            .collect()
    }
}

/// OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteEmbedder {
            url: url.into(),
            model: model.into(),
            api_key,
            agent,
        }
    }

    /// Reads the bearer token from `TARDIS_API_KEY`.
    pub fn from_env(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self::new(url, model, std::env::var("TARDIS_API_KEY").ok())
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        "remote"
    }

    fn model_id(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> Option<usize> {
        None
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::Embedding(format!("request to {} failed: {e}", self.url)))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Embedding(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(Error::Embedding(format!("HTTP {status}: {text}")));
        }
        let parsed: EmbeddingsResponse = serde_json::from_str(&text)?;
        let mut data = parsed.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_vectors_are_unit_length_and_deterministic() {
        let e = LocalHashEmbedder::default();
        let a = e.embed("Book me a taxi");
        assert_eq!(a.len(), 256);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(a, e.embed("book me a TAXI"));
    }

    #[test]
    fn empty_text_gives_zero_vector() {
        let e = LocalHashEmbedder::default();
        assert!(e.embed("").iter().all(|&x| x == 0.0));
        assert!(e.embed("a").iter().any(|&x| x > 0.0));
    }

    #[test]
    fn static_rejects_unknown() {
        let s = StaticEmbedder::new("t", [("a".to_string(), vec![1.0, 0.0])]).unwrap();
        assert!(s.embed_batch(&["b".to_string()]).is_err());
    }
}

