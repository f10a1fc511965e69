use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{apply_stop_sequences, BackendError, Completion, FinishReason, GenerationRequest, TextGenerator};

pub const ENV_ENDPOINT: &str = "CTI_BACKEND_ENDPOINT";
pub const ENV_TOKEN: &str = "CTI_BACKEND_TOKEN";
pub const ENV_MODEL: &str = "CTI_BACKEND_MODEL";

#[derive(Debug, Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

/// Client for completion services speaking the common
/// `POST {endpoint}` / `{"model", "prompt", "max_tokens", ...}` →
/// `{"choices": [{"text", "finish_reason"}]}` protocol.
///
/// The request id travels as an `Idempotency-Key` header so that retried
/// requests can be deduplicated server-side.
pub struct HttpCompletionBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    token: Option<String>,
    model: String,
}

impl HttpCompletionBackend {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, model: impl Into<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| BackendError::Permanent(e.to_string()))?;
        Ok(Self { client, endpoint: endpoint.into(), token, model: model.into() })
    }

    /// Reads `CTI_BACKEND_ENDPOINT`, `CTI_BACKEND_TOKEN` and `CTI_BACKEND_MODEL`.
    pub fn from_env() -> Result<Self, BackendError> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| BackendError::InvalidInput(format!("{ENV_ENDPOINT} is not set")))?;
        let token = std::env::var(ENV_TOKEN).ok();
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "text-davinci-002".to_string());
        Self::new(endpoint, token, model)
    }
}

impl TextGenerator for HttpCompletionBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Completion, BackendError> {
        let body = CompletionBody {
            model: &self.model,
            prompt: &request.prompt,
            max_tokens: request.params.max_new_tokens,
            temperature: request.params.temperature,
            stop: &request.params.stop_sequences,
            seed: request.params.seed,
        };
        let mut req = self.client.post(&self.endpoint).header("Idempotency-Key", &request.id).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let detail = resp.text().unwrap_or_default();
            return Err(BackendError::Permanent(format!("HTTP {status}: {detail}")));
        }
        let parsed: CompletionResponse =
            resp.json().map_err(|e| BackendError::Permanent(format!("malformed response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Permanent("response has no choices".into()))?;

        let mut text = match choice.text.strip_prefix(request.prompt.as_str()) {
            Some(rest) => rest.to_string(),
            None => choice.text,
        };
        let mut finish =
            if choice.finish_reason.as_deref() == Some("length") { FinishReason::Length } else { FinishReason::Stop };
        if apply_stop_sequences(&mut text, &request.params.stop_sequences) {
            finish = FinishReason::Stop;
        }
        Ok(Completion { text, finish })
    }
}
