use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{ClassifyRequest, ModelBackend, Prediction, TokenUsage};
use crate::error::{Result, ShuntError};
use crate::prob::{ClassId, ProbabilityVector};

/// Response mass inside this band is renormalized; outside it is rejected.
const RENORMALIZE_BAND: f64 = 0.05;

/// Request body of the remote classify protocol. Field order is the wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub id: String,
    pub payload: String,
    pub candidates: Vec<String>,
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub probs: Vec<f64>,
    pub class_ids: Vec<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

fn default_name() -> String {
    "remote-large".into()
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearer_token: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Extra attempts after the first one fails with a retryable error.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            name: default_name(),
            url: url.into(),
            bearer_token: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

/// Large model reached over HTTP using the JSON classify protocol.
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if !(config.url.starts_with("http://") || config.url.starts_with("https://")) {
            return Err(ShuntError::config(format!(
                "remote url `{}` is not http(s)",
                config.url
            )));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, request: &WireRequest) -> Result<WireResponse> {
        let mut call = self.agent.post(&self.config.url);
        if let Some(token) = &self.config.bearer_token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = call.send_json(request).map_err(|e| ShuntError::Transport {
            message: e.to_string(),
            attempts: 1,
        })?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ShuntError::Transport {
                message: format!("reading response body: {e}"),
                attempts: 1,
            })?;
        match status {
            200..=299 => {
                serde_json::from_str(&body).map_err(|e| ShuntError::protocol(format!("malformed response: {e}")))
            }
            500..=599 | 408 | 429 => Err(ShuntError::Transport {
                message: format!("server answered {status}"),
                attempts: 1,
            }),
            _ => Err(ShuntError::protocol(format!("server answered {status}: {body}"))),
        }
    }
}

/// Sends one classify request, retrying transport failures with exponential
/// backoff, and validates the answer against the requested candidates.
pub fn call_remote(backend: &RemoteBackend, request: &WireRequest) -> Result<(ProbabilityVector, TokenUsage)> {
    let budget = backend.config.max_retries + 1;
    let mut attempt = 0;
    let response = loop {
        attempt += 1;
        match backend.attempt(request) {
            Ok(r) => break r,
            Err(ShuntError::Transport { message, .. }) if attempt < budget => {
                let wait = backend.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                warn!(url = %backend.config.url, attempt, %message, "remote call failed, retrying");
                std::thread::sleep(Duration::from_millis(wait));
            }
            Err(ShuntError::Transport { message, .. }) => {
                return Err(ShuntError::Transport {
                    message,
                    attempts: attempt,
                })
            }
            Err(e) => return Err(e),
        }
    };
    let probs = validate_response(&request.candidates, response.probs, response.class_ids)?;
    Ok((
        probs,
        TokenUsage {
            input_tokens: response.input_tokens,
            output_tokens: response.output_tokens,
        },
    ))
}

/// Aligns a response to the requested candidate order and checks its mass.
pub(crate) fn validate_response(
    candidates: &[ClassId],
    probs: Vec<f64>,
    class_ids: Vec<String>,
) -> Result<ProbabilityVector> {
    if probs.len() != class_ids.len() {
        return Err(ShuntError::protocol(format!(
            "{} probs for {} class ids",
            probs.len(),
            class_ids.len()
        )));
    }
    if probs.len() != candidates.len() {
        return Err(ShuntError::protocol(format!(
            "requested {} candidates, response has {} entries",
            candidates.len(),
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(ShuntError::protocol(
            "response has negative or non-finite probabilities",
        ));
    }
    let mut aligned = Vec::with_capacity(candidates.len());
    for c in candidates {
        let i = class_ids
            .iter()
            .position(|id| id == c)
            .ok_or_else(|| ShuntError::protocol(format!("response missing candidate `{c}`")))?;
        aligned.push(probs[i]);
    }
    let total: f64 = aligned.iter().sum();
    if (total - 1.0).abs() > RENORMALIZE_BAND {
        return Err(ShuntError::protocol(format!(
            "response mass {total} outside [0.95, 1.05]"
        )));
    }
    if (total - 1.0).abs() > crate::prob::PROB_TOLERANCE {
        warn!(total, "renormalizing remote probabilities");
    }
    ProbabilityVector::from_weights(aligned, candidates.to_vec()).map_err(|e| ShuntError::protocol(e.to_string()))
}

impl ModelBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Prediction> {
        let wire = WireRequest {
            id: request.sample.id.clone(),
            payload: request.sample.payload.to_wire_string(),
            candidates: request.candidates.to_vec(),
            prompt: request.prompt.map(str::to_string),
        };
        let (probs, usage) = call_remote(self, &wire)?;
        Ok(Prediction {
            probs,
            usage,
            cost_micros: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn wire_request_field_order() {
        let r = WireRequest {
            id: "s1".into(),
            payload: "text".into(),
            candidates: ids(&["a", "b"]),
            prompt: None,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"id":"s1","payload":"text","candidates":["a","b"],"prompt":null}"#
        );
    }

    #[test]
    fn truncated_mass_is_renormalized() {
        let p = validate_response(&ids(&["a", "b"]), vec![0.49, 0.49], ids(&["a", "b"])).unwrap();
        assert!((p.probs()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mass_outside_band_is_protocol_error() {
        let e = validate_response(&ids(&["a", "b"]), vec![0.4, 0.4], ids(&["a", "b"])).unwrap_err();
        assert!(matches!(e, ShuntError::Protocol(_)));
    }

    #[test]
    fn shape_mismatch_is_protocol_error() {
        let e = validate_response(&ids(&["a", "b", "c"]), vec![0.5, 0.5], ids(&["a", "b"])).unwrap_err();
        assert!(matches!(e, ShuntError::Protocol(_)));
        let e = validate_response(&ids(&["a", "b"]), vec![0.5, 0.5], ids(&["a", "x"])).unwrap_err();
        assert!(matches!(e, ShuntError::Protocol(_)));
    }

    #[test]
    fn response_is_reordered_to_candidates() {
        let p = validate_response(&ids(&["a", "b"]), vec![0.9, 0.1], ids(&["b", "a"])).unwrap();
        assert_eq!(p.probs(), &[0.1, 0.9]);
    }

    #[test]
    fn rejects_non_http_url() {
        assert!(RemoteBackend::new(RemoteConfig::new("ftp://x")).is_err());
    }
}
