use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Embedder, EmbeddingError, EmbeddingVector};

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Remote provider speaking `POST {"texts": [...]}` → `{"vectors": [[...], ...]}`.
pub struct HttpEmbedder {
    endpoint: String,
    dimension: usize,
    retries: u32,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: String, dimension: usize, timeout: Duration, retries: u32) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build();
        Self {
            endpoint,
            dimension,
            retries,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn request_once(&self, body: &str) -> Result<String, EmbeddingError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| EmbeddingError::Provider(format!("{}: {e}", self.endpoint)))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| EmbeddingError::Provider(format!("{}: {e}", self.endpoint)))
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let body = serde_json::to_string(&EmbedRequest { texts })
            .map_err(|e| EmbeddingError::Provider(e.to_string()))?;
        let mut last_err = None;
        let mut raw = None;
        for _ in 0..=self.retries {
            match self.request_once(&body) {
                Ok(r) => {
                    raw = Some(r);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let raw = match raw {
            Some(r) => r,
            None => return Err(last_err.expect("at least one attempt is made")),
        };
        let parsed: EmbedResponse = serde_json::from_str(&raw)
            .map_err(|e| EmbeddingError::Provider(format!("bad response body: {e}")))?;
        if parsed.vectors.len() != texts.len() {
            return Err(EmbeddingError::Provider(format!(
                "expected {} vectors, got {}",
                texts.len(),
                parsed.vectors.len()
            )));
        }
        parsed
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dimension {
                    Err(EmbeddingError::Provider(format!(
                        "expected dimension {}, got {}",
                        self.dimension,
                        v.len()
                    )))
                } else if v.iter().any(|x| !x.is_finite()) {
                    Err(EmbeddingError::Provider("non-finite embedding value".into()))
                } else {
                    Ok(EmbeddingVector::new(v))
                }
            })
            .collect()
    }
}
