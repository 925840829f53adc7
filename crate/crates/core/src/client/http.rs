//! OpenAI-compatible `/chat/completions` backend.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendKind, CompletionRequest, CompletionResponse};
use crate::sampling::DecodingProfile;

pub const API_KEY_ENV: &str = "LEPE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// e.g. `http://localhost:8000/v1`
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Ask for token logprobs so First-Prob points can be built.
    #[serde(default)]
    pub logprobs: bool,
}

fn default_timeout() -> u64 {
    60
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Reads the API key from `LEPE_API_KEY`; servers without auth work
    /// without it.
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_key(config, key)
    }

    pub fn with_key(config: HttpConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        if !(config.base_url.starts_with("http://") || config.base_url.starts_with("https://")) {
            return Err(BackendError::Fatal(format!(
                "base_url {:?} is not an http(s) URL",
                config.base_url
            )));
        }
        if config.model.trim().is_empty() {
            return Err(BackendError::Fatal("model name is empty".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            config,
            api_key,
            agent,
        })
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    pub fn request_body(&self, req: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": req.prompt_text}],
            "max_tokens": req.max_tokens,
            "temperature": req.profile.temperature(),
        });
        match req.profile {
            DecodingProfile::RandomTemperature { .. } => {}
            DecodingProfile::TopK { k_cutoff, .. } => body["top_k"] = json!(k_cutoff),
            DecodingProfile::TopP { p_cutoff, .. } => body["top_p"] = json!(p_cutoff),
        }
        if self.config.logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(1);
        }
        body
    }
}

fn classify_status(status: u16, body: &str) -> BackendError {
    let msg = format!(
        "HTTP {status}: {}",
        body.chars().take(300).collect::<String>()
    );
    match status {
        408 | 409 | 425 | 429 | 500..=599 => BackendError::Transient(msg),
        _ => BackendError::Fatal(msg),
    }
}

/// Text and first-token probability from a chat-completions payload.
pub fn parse_completion(v: &Value) -> Result<(String, Option<f64>), BackendError> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Transient("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let prob = choice
        .pointer("/logprobs/content/0/logprob")
        .and_then(Value::as_f64)
        .map(|lp| lp.exp().clamp(f64::MIN_POSITIVE, 1.0));
    Ok((text, prob))
}

impl Backend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn identity(&self) -> String {
        format!("http:{}@{}", self.config.model, self.config.base_url)
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let started = Instant::now();
        let mut call = self
            .agent
            .post(self.endpoint())
            .header("X-Request-Id", &req.request_id);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(self.request_body(req))
            .map_err(|e| match e {
                ureq::Error::BadUri(_)
                | ureq::Error::InvalidProxyUrl
                | ureq::Error::RequireHttpsOnly(_) => BackendError::Fatal(e.to_string()),
                other => BackendError::Transient(other.to_string()),
            })?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        if status != 200 {
            return Err(classify_status(status, &body));
        }
        let v: Value = serde_json::from_str(&body)
            .map_err(|e| BackendError::Transient(format!("malformed response body: {e}")))?;
        let (text, first_token_probability) = parse_completion(&v)?;
        Ok(CompletionResponse {
            text,
            first_token_probability,
            backend: BackendKind::Http,
            latency: started.elapsed(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Minimal HTTP/1.1 server answering each connection with the next
    /// scripted `(status, body)` and capturing request bodies.
    fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in script {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut headers = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen2
                    .lock()
                    .unwrap()
                    .push(format!("{headers}\n{}", String::from_utf8(buf).unwrap()));
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    fn ok_body(text: &str, logprob: Option<f64>) -> String {
        let mut v = json!({"choices": [{"message": {"role": "assistant", "content": text}}]});
        if let Some(lp) = logprob {
            v["choices"][0]["logprobs"] = json!({"content": [{"token": "The", "logprob": lp}]});
        }
        v.to_string()
    }

    fn backend(url: String, logprobs: bool) -> HttpBackend {
        HttpBackend::with_key(
            HttpConfig {
                base_url: url,
                model: "toy".into(),
                timeout_secs: 5,
                logprobs,
            },
            Some("sk-test".into()),
        )
        .unwrap()
    }

    fn req() -> CompletionRequest {
        CompletionRequest::new(
            "d7",
            "What is 2+2?",
            DecodingProfile::TopP {
                temperature: 0.8,
                p_cutoff: 0.9,
            },
        )
    }

    #[test]
    fn completes_and_reads_first_token_probability() {
        let (url, seen) = serve(vec![(200, ok_body("The answer is 4", Some(-0.5)))]);
        let r = backend(url, true).complete(&req()).unwrap();
        assert_eq!(r.text, "The answer is 4");
        assert!((r.first_token_probability.unwrap() - (-0.5f64).exp()).abs() < 1e-12);
        let sent = seen.lock().unwrap()[0].clone();
        assert!(sent
            .to_ascii_lowercase()
            .contains("authorization: bearer sk-test"));
        let body: Value = serde_json::from_str(sent.split("\n\n").last().unwrap().trim()).unwrap();
        assert_eq!(body["top_p"], json!(0.9));
        assert_eq!(body["model"], json!("toy"));
        assert_eq!(body["logprobs"], json!(true));
    }

    #[test]
    fn no_logprobs_means_no_probability() {
        let (url, _) = serve(vec![(200, ok_body("B", None))]);
        let r = backend(url, false).complete(&req()).unwrap();
        assert_eq!(r.first_token_probability, None);
    }

    #[test]
    fn status_classification() {
        let (url, _) = serve(vec![(503, "{}".into()), (401, "{}".into())]);
        let b = backend(url, false);
        assert!(matches!(
            b.complete(&req()),
            Err(BackendError::Transient(_))
        ));
        assert!(matches!(b.complete(&req()), Err(BackendError::Fatal(_))));
    }

    #[test]
    fn retry_over_real_http() {
        let (url, _) = serve(vec![
            (500, "{}".into()),
            (429, "{}".into()),
            (200, ok_body("The answer is C", None)),
        ]);
        let b = backend(url, false);
        let out = crate::client::complete_with_retry(
            &b,
            &req(),
            &crate::client::RetryPolicy::immediate(3),
        )
        .unwrap();
        assert!(matches!(
            out,
            crate::client::DrawOutcome::Completed { attempts: 3, .. }
        ));
    }

    #[test]
    fn rejects_bad_config() {
        let bad = HttpConfig {
            base_url: "localhost:1".into(),
            model: "m".into(),
            timeout_secs: 1,
            logprobs: false,
        };
        assert!(matches!(
            HttpBackend::with_key(bad, None),
            Err(BackendError::Fatal(_))
        ));
    }

    #[test]
    fn connection_refused_is_transient() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let b = backend(format!("http://{addr}/v1"), false);
        assert!(matches!(
            b.complete(&req()),
            Err(BackendError::Transient(_))
        ));
    }
}
