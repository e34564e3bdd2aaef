use super::{AnnotationRequest, AnnotationResponse, AnnotatorError, Backend};
use std::time::{Duration, Instant};
use ureq::Agent;

/// Environment variable holding the bearer token for the HTTP backend.
pub const TOKEN_ENV: &str = "MODFACTORY_ANNOTATOR_TOKEN";

/// `POST {base_url}/v1/annotate` with the request as JSON; expects an
/// [`AnnotationResponse`] JSON body.
pub struct HttpBackend {
    agent: Agent,
    url: String,
    token: Option<String>,
    timeout: Duration,
}

impl HttpBackend {
    pub fn new(base_url: &str, timeout: Duration, token: Option<String>) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            agent,
            url: format!("{}/v1/annotate", base_url.trim_end_matches('/')),
            token,
            timeout,
        }
    }

    /// Like [`HttpBackend::new`], reading the token from [`TOKEN_ENV`].
    pub fn from_env(base_url: &str, timeout: Duration) -> Self {
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        if token.is_none() {
            tracing::warn!("{TOKEN_ENV} is not set; sending unauthenticated requests");
        }
        Self::new(base_url, timeout, token)
    }
}

fn retry_after_ms(value: Option<&str>) -> Option<u64> {
    value?
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|s| *s >= 0.0)
        .map(|s| (s * 1000.0) as u64)
}

impl Backend for HttpBackend {
    fn backend_id(&self) -> String {
        format!("http:{}", self.url)
    }

    fn call(&self, request: &AnnotationRequest) -> Result<AnnotationResponse, AnnotatorError> {
        let started = Instant::now();
        let mut builder = self
            .agent
            .post(&self.url)
            .header("Idempotency-Key", request.content_key());
        if let Some(token) = &self.token {
            builder = builder.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = builder.send_json(request).map_err(|e| match e {
            ureq::Error::Timeout(_) => AnnotatorError::Timeout {
                after_ms: self.timeout.as_millis() as u64,
            },
            other => AnnotatorError::Backend {
                status: None,
                message: other.to_string(),
            },
        })?;
        let status = response.status().as_u16();
        if status == 429 {
            let after = response.headers().get("retry-after").and_then(|v| v.to_str().ok());
            return Err(AnnotatorError::RateLimited {
                retry_after_ms: retry_after_ms(after),
            });
        }
        let body = response.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => AnnotatorError::Timeout {
                after_ms: self.timeout.as_millis() as u64,
            },
            other => AnnotatorError::protocol(other.to_string()),
        })?;
        if status >= 500 {
            return Err(AnnotatorError::Backend {
                status: Some(status),
                message: body,
            });
        }
        if !(200..300).contains(&status) {
            return Err(AnnotatorError::Protocol {
                status: Some(status),
                message: body,
            });
        }
        let mut parsed: AnnotationResponse = serde_json::from_str(&body)
            .map_err(|e| AnnotatorError::protocol(format!("malformed response body: {e}")))?;
        if parsed.latency_ms == 0 {
            parsed.latency_ms = started.elapsed().as_millis() as u64;
        }
        Ok(parsed)
    }
}
