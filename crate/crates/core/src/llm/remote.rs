use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{Backend, BackendError, GenerationRequest};

/// OpenAI-compatible `/chat/completions` client.
///
/// `repetition_penalty` is sent as an extension field. If the server answers
/// 400/422 to a request carrying it, the request is repeated once without
/// the field and the field is dropped for the rest of the run.
pub struct RemoteChatBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    send_penalty: AtomicBool,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

impl RemoteChatBackend {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteChatBackend {
            url: url.into(),
            model: model.into(),
            api_key,
            agent,
            send_penalty: AtomicBool::new(true),
        }
    }

    pub fn from_env(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self::new(url, model, std::env::var("TARDIS_API_KEY").ok())
    }

    pub fn request_body(&self, request: &GenerationRequest, with_penalty: bool) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if with_penalty {
            body["repetition_penalty"] = json!(request.repetition_penalty);
        }
        if let Some(stop) = &request.stop {
            body["stop"] = json!(stop);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn post(&self, body: &Value) -> Result<(u16, String), BackendError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        Ok((status, text))
    }
}

fn classify(status: u16, body: String) -> Result<String, BackendError> {
    match status {
        200..=299 => {
            let parsed: ChatResponse = serde_json::from_str(&body)
                .map_err(|e| BackendError::Fatal(format!("malformed response: {e}")))?;
            let choice = parsed
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| BackendError::Fatal("response has no choices".into()))?;
            Ok(choice.message.content.unwrap_or_default())
        }
        408 | 429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}: {body}"))),
        _ => Err(BackendError::Fatal(format!("HTTP {status}: {body}"))),
    }
}

impl Backend for RemoteChatBackend {
    fn id(&self) -> &str {
        &self.model
    }

    fn call(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let with_penalty = self.send_penalty.load(Ordering::Relaxed);
        let (status, body) = self.post(&self.request_body(request, with_penalty))?;
        if with_penalty && (status == 400 || status == 422) {
            log::warn!(
                "`{}`: server rejected request with repetition_penalty (HTTP {status}); retrying without it",
                request.request_tag
            );
            let (status2, body2) = self.post(&self.request_body(request, false))?;
            if (200..300).contains(&status2) {
                self.send_penalty.store(false, Ordering::Relaxed);
            }
            return classify(status2, body2);
        }
        classify(status, body)
    }
}
