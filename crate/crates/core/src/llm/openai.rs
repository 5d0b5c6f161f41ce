//! OpenAI-compatible chat-completions and embeddings over HTTP.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, EmbeddingBackend, ResponseFormat, RoleTag};
use crate::error::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiConfig {
    /// Base URL including the version prefix, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    /// Environment variable holding the bearer token. Unset means no auth header.
    pub api_key_env: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub timeout_secs: u64,
    pub roles: BTreeMap<RoleTag, RoleSettings>,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        let roles = RoleTag::ALL
            .iter()
            .map(|&role| {
                let temperature = match role {
                    RoleTag::EpisodePredictor => 0.7,
                    RoleTag::EpisodeGenerator => 0.2,
                    _ => 0.0,
                };
                (
                    role,
                    RoleSettings {
                        model: None,
                        temperature,
                    },
                )
            })
            .collect();
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            chat_model: "gpt-4o-mini".into(),
            embedding_model: "text-embedding-3-small".into(),
            timeout_secs: 60,
            roles,
        }
    }
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl std::fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("base_url", &self.config.base_url)
            .field("chat_model", &self.config.chat_model)
            .finish_non_exhaustive()
    }
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            api_key,
            http,
        })
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let mut request = self.http.post(self.endpoint(path)).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(map_reqwest)?;
        let status = response.status();
        let text = response.text().map_err(map_reqwest)?;
        if !status.is_success() {
            return Err(LlmError::Http {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::InvalidResponse(e.to_string()))
    }

    fn chat_body(&self, req: &ChatRequest) -> Value {
        let settings = self.config.roles.get(&req.role_tag);
        let model = settings
            .and_then(|s| s.model.clone())
            .unwrap_or_else(|| self.config.chat_model.clone());
        let temperature = settings.map(|s| s.temperature).unwrap_or(0.0);
        let mut body = json!({
            "model": model,
            "temperature": temperature,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
        });
        // json_object mode only accepts objects; arrays stay free-form.
        if req.response_format == ResponseFormat::JsonObject {
            body["response_format"] = json!({"type": "json_object"});
        }
        body
    }
}

fn map_reqwest(err: reqwest::Error) -> LlmError {
    if err.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::Transport(err.to_string())
    }
}

impl ChatBackend for OpenAiBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, LlmError> {
        let value = self.post("chat/completions", &self.chat_body(req))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| LlmError::InvalidResponse("missing choices[0].message.content".into()))
    }
}

impl EmbeddingBackend for OpenAiBackend {
    fn embed(&self, text: &str) -> Result<Vec<f32>, LlmError> {
        let body = json!({"model": self.config.embedding_model, "input": text});
        let value = self.post("embeddings", &body)?;
        let values = value["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| LlmError::InvalidResponse("missing data[0].embedding".into()))?;
        values
            .iter()
            .map(|v| {
                v.as_f64()
                    .map(|x| x as f32)
                    .ok_or_else(|| LlmError::InvalidResponse("non-numeric embedding".into()))
            })
            .collect()
    }
}
