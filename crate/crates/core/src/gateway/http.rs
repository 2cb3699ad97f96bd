//! Live transport for chat-completions style HTTP endpoints.
//!
//! `POST {base_url}/chat/completions` with `{model, messages, temperature,
//! seed?, max_tokens?}` and `POST {base_url}/embeddings` with `{model,
//! input}`. The bearer token is read from an environment variable. Rate
//! limits and server errors are retried with capped exponential backoff.

use std::time::Duration;

use serde_json::{json, Value};

use super::transport::Transport;
use super::types::{ChatRequest, ChatResponse, FinishReason, Usage};
use super::GatewayError;

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(8) }
    }
}

pub struct HttpTransport {
    base_url: String,
    api_key: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            agent: ureq::Agent::new_with_config(config),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads the API key from `env_var`.
    pub fn from_env(base_url: impl Into<String>, env_var: &str) -> Result<Self, GatewayError> {
        let key = std::env::var(env_var)
            .map_err(|_| GatewayError::Transport(format!("environment variable {env_var} is not set")))?;
        Ok(Self::new(base_url, key))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}/{}", self.base_url, path);
        let mut last_error = String::new();
        for attempt in 0..self.retry.max_attempts.max(1) {
            if attempt > 0 {
                let factor = 1u32 << (attempt - 1).min(16);
                std::thread::sleep((self.retry.base_delay * factor).min(self.retry.max_delay));
            }
            let result = self
                .agent
                .post(&url)
                .header("Authorization", &format!("Bearer {}", self.api_key))
                .send_json(body);
            let mut response = match result {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status().as_u16();
            if status == 429 || status >= 500 {
                last_error = format!("HTTP {status} from {url}");
                continue;
            }
            if !(200..300).contains(&status) {
                let detail = response.body_mut().read_to_string().unwrap_or_default();
                return Err(GatewayError::Transport(format!("HTTP {status} from {url}: {detail}")));
            }
            return response
                .body_mut()
                .read_json::<Value>()
                .map_err(|e| GatewayError::Transport(format!("invalid JSON from {url}: {e}")));
        }
        Err(GatewayError::Transport(format!(
            "giving up after {} attempts: {last_error}",
            self.retry.max_attempts
        )))
    }
}

pub(crate) fn chat_body(request: &ChatRequest) -> Value {
    let mut body = json!({
        "model": request.model_id,
        "messages": request.messages,
        "temperature": request.temperature,
    });
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    if let Some(max) = request.max_output {
        body["max_tokens"] = json!(max);
    }
    body
}

pub(crate) fn parse_chat_response(value: &Value) -> Result<ChatResponse, GatewayError> {
    let malformed = |what: &str| GatewayError::Transport(format!("malformed chat response: {what}"));
    let choice = value.get("choices").and_then(|c| c.get(0)).ok_or_else(|| malformed("no choices"))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    let usage = Usage {
        prompt_units: value.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        output_units: value.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    };
    Ok(ChatResponse { text, finish_reason, usage })
}

pub(crate) fn parse_embedding_response(value: &Value, expected: usize) -> Result<Vec<Vec<f64>>, GatewayError> {
    let malformed = |what: String| GatewayError::Transport(format!("malformed embedding response: {what}"));
    let data = value.get("data").and_then(Value::as_array).ok_or_else(|| malformed("no data array".into()))?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
        let values = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(format!("item {pos} has no embedding")))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| malformed(format!("item {pos} has a non-numeric value"))))
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push((index, values));
    }
    rows.sort_by_key(|(i, _)| *i);
    if rows.len() != expected {
        return Err(malformed(format!("expected {expected} vectors, got {}", rows.len())));
    }
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}

impl Transport for HttpTransport {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let value = self.post("chat/completions", &chat_body(request))?;
        parse_chat_response(&value)
    }

    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let value = self.post("embeddings", &json!({ "model": model_id, "input": texts }))?;
        parse_embedding_response(&value, texts.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::types::Message;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves the given `(status, body)` replies in order, forwarding each
    /// received request body to the returned channel.
    fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut length = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line["authorization:".len()..].trim().to_string();
                    }
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                tx.send((request_line.trim().to_string(), auth, String::from_utf8(buf).unwrap())).unwrap();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn fast() -> RetryPolicy {
        RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(1), max_delay: Duration::from_millis(2) }
    }

    #[test]
    fn chat_wire_format() {
        let reply = r#"{"choices":[{"message":{"role":"assistant","content":"hi there"},"finish_reason":"stop"}],
                        "usage":{"prompt_tokens":5,"completion_tokens":2}}"#;
        let (url, rx) = serve(vec![(200, reply.to_string())]);
        let transport = HttpTransport::new(url, "secret").with_retry(fast());
        let mut req = ChatRequest::new("gpt-test", vec![Message::user("hello")]);
        req.seed = Some(3);
        let resp = transport.chat(&req).unwrap();
        assert_eq!(resp.text, "hi there");
        assert_eq!(resp.finish_reason, FinishReason::Stop);
        assert_eq!(resp.usage, Usage { prompt_units: 5, output_units: 2 });
        let (line, auth, body) = rx.recv().unwrap();
        assert_eq!(line, "POST /v1/chat/completions HTTP/1.1");
        assert_eq!(auth, "Bearer secret");
        let body: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(body["model"], "gpt-test");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["seed"], 3);
        assert!(body.get("max_tokens").is_none());
    }

    #[test]
    fn retries_server_errors() {
        let ok = r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#;
        let (url, rx) = serve(vec![(503, "{}".into()), (200, ok.into())]);
        let transport = HttpTransport::new(url, "k").with_retry(fast());
        let vectors = transport.embed("emb", &["a".into(), "b".into()]).unwrap();
        assert_eq!(vectors, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (line, _, _) = rx.recv().unwrap();
        assert!(line.contains("/v1/embeddings"));
        let (_, _, body) = rx.recv().unwrap();
        assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["input"][1], "b");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, _rx) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let transport = HttpTransport::new(url, "k").with_retry(fast());
        let err = transport.chat(&ChatRequest::new("m", vec![Message::user("x")])).unwrap_err();
        assert!(err.to_string().contains("HTTP 400"), "{err}");
    }

    #[test]
    fn content_filter_maps_to_error() {
        let v: Value = serde_json::from_str(r#"{"choices":[{"message":{"content":""},"finish_reason":"content_filter"}]}"#).unwrap();
        assert_eq!(parse_chat_response(&v).unwrap().finish_reason, FinishReason::Error);
    }
}
