use crate::error::Result;
use crate::llm::{DecodingParams, GenerationResponse, LlmGateway};
use crate::prompt::{Bindings, TemplateId, TemplateSet};
use crate::rng::derived_u64;

/// Everything a generation step needs to issue one templated LLM call.
#[derive(Clone, Copy)]
pub struct GenerationContext<'a> {
    pub gateway: &'a LlmGateway,
    pub templates: &'a TemplateSet,
    pub decoding: DecodingParams,
    pub rng_seed: u64,
}

/// A rendered prompt and the backend's answer to it.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub prompt: String,
    pub prompt_hash: String,
    pub response: GenerationResponse,
}

impl<'a> GenerationContext<'a> {
    pub fn new(gateway: &'a LlmGateway, templates: &'a TemplateSet) -> Self {
        GenerationContext {
            gateway,
            templates,
            decoding: DecodingParams::default(),
            rng_seed: 0,
        }
    }

    pub fn with_decoding(mut self, decoding: DecodingParams) -> Self {
        self.decoding = decoding;
        self
    }

    pub fn with_rng_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn render(&self, id: TemplateId, bindings: &Bindings) -> Result<String> {
        self.templates.render(id, bindings)
    }

    /// Sends an already rendered prompt. The tag's segments also key the
    /// per-request sampling seed.
    pub fn send(&self, prompt: String, tag: String) -> Result<Exchange> {
        let path: Vec<&str> = tag.split('/').collect();
        let seed = derived_u64(self.rng_seed, &path);
        let request = self.decoding.request(prompt, tag, Some(seed));
        let prompt_hash = request.prompt_hash();
        let response = self.gateway.complete(&request)?;
        Ok(Exchange {
            prompt: request.prompt,
            prompt_hash,
            response,
        })
    }

    pub fn ask(&self, id: TemplateId, bindings: &Bindings, tag: String) -> Result<Exchange> {
        let prompt = self.render(id, bindings)?;
        self.send(prompt, tag)
    }
}

/// First line of `raw` that is not blank, trimmed.
pub fn first_nonempty_line(raw: &str) -> Option<&str> {
    raw.lines().map(str::trim).find(|l| !l.is_empty())
}
