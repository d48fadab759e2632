//! HTTP client for the model sidecar: sentence embeddings, token embeddings
//! and named-entity recognition behind one local service.
//!
//! Endpoints: `POST /embed_sentence {text} -> {vector}`,
//! `POST /embed_tokens {text} -> {tokens, vectors}`,
//! `POST /ner {text} -> {entities: [{text, label}]}` and
//! `GET /health -> {models, dims}`.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::embedding::{
    Entity, EntityRecognizer, SentenceEmbedder, ServiceError, TokenEmbedder, TokenEmbeddings,
};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    /// Model identifier per role (`sentence`, `token`, `ner`).
    #[serde(default)]
    pub models: BTreeMap<String, String>,
    /// Output dimension per role.
    #[serde(default)]
    pub dims: BTreeMap<String, usize>,
}

#[derive(Deserialize)]
struct VectorResponse {
    vector: Vec<f32>,
}

#[derive(Deserialize)]
struct EntitiesResponse {
    entities: Vec<Entity>,
}

pub struct SidecarClient {
    agent: ureq::Agent,
    base_url: String,
    health: Health,
}

impl SidecarClient {
    /// Connects and reads `/health`; an unreachable sidecar fails here.
    pub fn connect(base_url: &str, timeout: Duration) -> Result<Arc<Self>, ServiceError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut client = Self {
            agent,
            base_url: base_url.trim_end_matches('/').to_string(),
            health: Health::default(),
        };
        client.health = client.fetch_health()?;
        Ok(Arc::new(client))
    }

    pub fn health(&self) -> &Health {
        &self.health
    }

    pub fn fetch_health(&self) -> Result<Health, ServiceError> {
        let url = format!("{}/health", self.base_url);
        let response = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| ServiceError::Unavailable(format!("{url}: {e}")))?;
        decode(&url, response)
    }

    fn post<T: DeserializeOwned>(&self, path: &str, text: &str) -> Result<T, ServiceError> {
        let url = format!("{}{path}", self.base_url);
        let response = self
            .agent
            .post(&url)
            .send_json(json!({ "text": text }))
            .map_err(|e| ServiceError::Unavailable(format!("{url}: {e}")))?;
        decode(&url, response)
    }

    fn model(&self, role: &str) -> String {
        self.health
            .models
            .get(role)
            .cloned()
            .unwrap_or_else(|| format!("sidecar-{role}"))
    }

    pub fn sentence_embedder(self: &Arc<Self>) -> Result<SidecarSentenceEmbedder, ServiceError> {
        let dim = self.health.dims.get("sentence").copied().ok_or_else(|| {
            ServiceError::Malformed("health report has no sentence dimension".into())
        })?;
        Ok(SidecarSentenceEmbedder {
            client: Arc::clone(self),
            id: format!("sidecar:{}", self.model("sentence")),
            dim,
        })
    }

    pub fn token_embedder(self: &Arc<Self>) -> SidecarTokenEmbedder {
        SidecarTokenEmbedder {
            client: Arc::clone(self),
            id: format!("sidecar:{}", self.model("token")),
        }
    }

    pub fn recognizer(self: &Arc<Self>) -> SidecarRecognizer {
        SidecarRecognizer {
            client: Arc::clone(self),
            id: format!("sidecar:{}", self.model("ner")),
        }
    }
}

fn decode<T: DeserializeOwned>(
    url: &str,
    mut response: ureq::http::Response<ureq::Body>,
) -> Result<T, ServiceError> {
    let code = response.status().as_u16();
    let body = response
        .body_mut()
        .read_to_string()
        .map_err(|e| ServiceError::Unavailable(format!("{url}: {e}")))?;
    match code {
        200..=299 => serde_json::from_str(&body)
            .map_err(|e| ServiceError::Malformed(format!("{url}: {e}"))),
        400..=499 => Err(ServiceError::BadRequest(format!("{url}: HTTP {code}: {body}"))),
        _ => Err(ServiceError::Unavailable(format!("{url}: HTTP {code}"))),
    }
}

pub struct SidecarSentenceEmbedder {
    client: Arc<SidecarClient>,
    id: String,
    dim: usize,
}

impl SentenceEmbedder for SidecarSentenceEmbedder {
    fn embedder_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_sentence(&self, text: &str) -> Result<Vec<f32>, ServiceError> {
        let response: VectorResponse = self.client.post("/embed_sentence", text)?;
        if response.vector.len() != self.dim {
            return Err(ServiceError::Malformed(format!(
                "expected {} dimensions, got {}",
                self.dim,
                response.vector.len()
            )));
        }
        Ok(response.vector)
    }
}

pub struct SidecarTokenEmbedder {
    client: Arc<SidecarClient>,
    id: String,
}

impl TokenEmbedder for SidecarTokenEmbedder {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, ServiceError> {
        let response: TokenEmbeddings = self.client.post("/embed_tokens", text)?;
        if response.tokens.len() != response.vectors.len() {
            return Err(ServiceError::Malformed(format!(
                "{} tokens but {} vectors",
                response.tokens.len(),
                response.vectors.len()
            )));
        }
        Ok(response)
    }
}

pub struct SidecarRecognizer {
    client: Arc<SidecarClient>,
    id: String,
}

impl EntityRecognizer for SidecarRecognizer {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn entities(&self, text: &str) -> Result<Vec<Entity>, ServiceError> {
        let response: EntitiesResponse = self.client.post("/ner", text)?;
        Ok(response.entities)
    }
}
