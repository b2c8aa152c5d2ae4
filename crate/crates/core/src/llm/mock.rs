//! Scripted deterministic backend for hermetic runs.
//!
//! A script is an ordered list of rules; the first rule whose matcher
//! accepts the request supplies the reply. Replies depend only on the
//! request (tag and prompt), never on call order, so the same script gives
//! the same outputs under any scheduling.

use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, GenerationRequest};
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMatch {
    /// Regex searched in the request tag.
    Tag(String),
    /// Exact SHA-256 (hex) of the prompt.
    PromptHash(String),
    /// Substring of the prompt.
    PromptContains(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reply {
    Text(String),
    /// `count` numbered lines `N. {stem} [{tag}] #N`.
    Enumerate { count: usize, stem: String },
    /// The `/`-separated segment of the request tag at this index.
    TagSegment(usize),
}

impl Reply {
    fn render(&self, request: &GenerationRequest) -> String {
        match self {
            Reply::Text(t) => t.clone(),
            Reply::Enumerate { count, stem } => (1..=*count)
                .map(|i| format!("{i}. {stem} [{}] #{i}", request.request_tag))
                .collect::<Vec<_>>()
                .join("\n"),
            Reply::TagSegment(i) => request
                .request_tag
                .split('/')
                .nth(*i)
                .unwrap_or_default()
                .to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: RuleMatch,
    pub reply: Reply,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default = "default_strict")]
    pub strict: bool,
    pub rules: Vec<MockRule>,
    /// Reply for unmatched requests when not strict.
    #[serde(default)]
    pub fallback: Option<String>,
}

fn default_strict() -> bool {
    true
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Answers every pipeline request as a fully compliant model would:
    /// `k` items per generation call, `ideas` spark thoughts per seed, and a
    /// verifier that always names the target class.
    pub fn cooperative(ideas: usize, k: usize) -> Self {
        let rule = |re: &str, reply: Reply| MockRule {
            matcher: RuleMatch::Tag(re.to_string()),
            reply,
        };
        MockScript {
            strict: true,
            rules: vec![
                rule("^desc/", Reply::Text("Requests that share one intent.".into())),
                rule("^spark/", Reply::Enumerate { count: ideas, stem: "idea".into() }),
                rule("^seg/", Reply::Enumerate { count: k, stem: "semantic example".into() }),
                rule("^(ca_)?disc/", Reply::Text("The target focuses on a different need.".into())),
                rule("^ceg/", Reply::Enumerate { count: k, stem: "contrastive example".into() }),
                rule("^verify/", Reply::TagSegment(1)),
                rule("^modify/", Reply::Enumerate { count: 1, stem: "modified example".into() }),
            ],
            fallback: None,
        }
    }
}

struct CompiledRule {
    matcher: CompiledMatch,
    reply: Reply,
}

enum CompiledMatch {
    Tag(Regex),
    PromptHash(String),
    PromptContains(String),
}

pub struct ScriptedMockBackend {
    rules: Vec<CompiledRule>,
    strict: bool,
    fallback: Option<String>,
}

impl ScriptedMockBackend {
    pub fn new(script: MockScript) -> Result<Self> {
        let rules = script
            .rules
            .into_iter()
            .map(|r| {
                let matcher = match r.matcher {
                    RuleMatch::Tag(re) => CompiledMatch::Tag(
                        Regex::new(&re).map_err(|e| Error::Config(format!("bad tag pattern `{re}`: {e}")))?,
                    ),
                    RuleMatch::PromptHash(h) => CompiledMatch::PromptHash(h.to_ascii_lowercase()),
                    RuleMatch::PromptContains(s) => CompiledMatch::PromptContains(s),
                };
                Ok(CompiledRule { matcher, reply: r.reply })
            })
            .collect::<Result<_>>()?;
        Ok(ScriptedMockBackend {
            rules,
            strict: script.strict,
            fallback: script.fallback,
        })
    }

    pub fn cooperative(ideas: usize, k: usize) -> Self {
        Self::new(MockScript::cooperative(ideas, k)).expect("built-in script compiles")
    }

    pub fn reply_for(&self, request: &GenerationRequest) -> Option<String> {
        let prompt_hash = sha256_hex(&request.prompt);
        self.rules
            .iter()
            .find(|r| match &r.matcher {
                CompiledMatch::Tag(re) => re.is_match(&request.request_tag),
                CompiledMatch::PromptHash(h) => *h == prompt_hash,
                CompiledMatch::PromptContains(s) => request.prompt.contains(s.as_str()),
            })
            .map(|r| r.reply.render(request))
    }
}

impl Backend for ScriptedMockBackend {
    fn id(&self) -> &str {
        "scripted-mock"
    }

    fn call(&self, request: &GenerationRequest) -> std::result::Result<String, BackendError> {
        match self.reply_for(request) {
            Some(text) => Ok(text),
            None if self.strict => Err(BackendError::Unscripted),
            None => Ok(self.fallback.clone().unwrap_or_default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{DecodingParams, LlmGateway};
    use std::sync::Arc;

    fn req(prompt: &str, tag: &str) -> GenerationRequest {
        DecodingParams::default().request(prompt.into(), tag.into(), None)
    }

    #[test]
    fn prompt_hash_match_returns_canned_text() {
        let script = MockScript {
            strict: true,
            rules: vec![MockRule {
                matcher: RuleMatch::PromptHash(sha256_hex("exact prompt")),
                reply: Reply::Text("canned".into()),
            }],
            fallback: None,
        };
        let gw = LlmGateway::simple(Arc::new(ScriptedMockBackend::new(script).unwrap()));
        let resp = gw.complete(&req("exact prompt", "t")).unwrap();
        assert_eq!(resp.raw_text, "canned");
        assert_eq!(resp.backend_id, "scripted-mock");
        assert_eq!(gw.audit().entries()[0].latency_ms, resp.latency_ms);
    }

    #[test]
    fn strict_unmatched_names_tag() {
        let gw = LlmGateway::simple(Arc::new(ScriptedMockBackend::new(MockScript {
            strict: true,
            rules: vec![],
            fallback: None,
        })
        .unwrap()));
        match gw.complete(&req("p", "seg/x/3")) {
            Err(Error::UnscriptedRequest(tag)) => assert_eq!(tag, "seg/x/3"),
            other => panic!("{other:?}"),
        }
        assert_eq!(gw.calls(), 1);
    }

    #[test]
    fn lenient_uses_fallback() {
        let mock = ScriptedMockBackend::new(MockScript {
            strict: false,
            rules: vec![],
            fallback: Some("meh".into()),
        })
        .unwrap();
        assert_eq!(mock.call(&req("p", "t")).unwrap(), "meh");
    }

    #[test]
    fn first_matching_rule_wins() {
        let script: MockScript = serde_json::from_str(
            r#"{"rules": [
                {"match": {"tag": "^verify/a/3$"}, "reply": {"text": "b"}},
                {"match": {"tag": "^verify/"}, "reply": {"tag_segment": 1}}
            ]}"#,
        )
        .unwrap();
        let mock = ScriptedMockBackend::new(script).unwrap();
        assert_eq!(mock.call(&req("p", "verify/a/3")).unwrap(), "b");
        assert_eq!(mock.call(&req("p", "verify/a/4")).unwrap(), "a");
    }

    #[test]
    fn replies_are_pure() {
        let mock = ScriptedMockBackend::cooperative(5, 5);
        let r = req("p", "seg/a/1");
        assert_eq!(mock.call(&r).unwrap(), mock.call(&r).unwrap());
        assert_eq!(mock.call(&r).unwrap().lines().count(), 5);
    }
}
