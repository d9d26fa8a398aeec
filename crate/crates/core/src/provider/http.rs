use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ChatMessage, ChatModel, Embedder, ProviderError, RateLimiter};

/// Endpoint settings. The API key is never read from configuration files;
/// callers pass it in from the environment.
#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Expected embedding length, if known; mismatches are integrity errors.
    pub dim: Option<usize>,
}

/// Blocking client for `POST {base}/embeddings` and `POST {base}/chat/completions`.
pub struct OpenAiCompatClient {
    cfg: HttpConfig,
    http: reqwest::blocking::Client,
    limiter: Arc<RateLimiter>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f32,
}

impl OpenAiCompatClient {
    pub fn new(cfg: HttpConfig, limiter: Arc<RateLimiter>) -> Result<Self, ProviderError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| ProviderError::Rejected(format!("http client: {e}")))?;
        Ok(Self { cfg, http, limiter })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn post<T: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &impl Serialize,
    ) -> Result<T, ProviderError> {
        let _permit = self.limiter.acquire();
        let mut req = self.http.post(self.url(path)).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ProviderError::transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| ProviderError::transport(format!("reading body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::transport(format!("HTTP {status}: {}", snippet(&text))));
        }
        if !status.is_success() {
            return Err(ProviderError::Rejected(format!("HTTP {status}: {}", snippet(&text))));
        }
        serde_json::from_str(&text)
            .map_err(|e| ProviderError::Integrity(format!("unexpected response shape: {e}")))
    }
}

fn snippet(s: &str) -> &str {
    let end = s.char_indices().nth(200).map_or(s.len(), |(i, _)| i);
    &s[..end]
}

impl Embedder for OpenAiCompatClient {
    fn tag(&self) -> String {
        format!("openai-compat:{}", self.cfg.model)
    }

    fn dim(&self) -> Option<usize> {
        self.cfg.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let body = json!({ "model": self.cfg.model, "input": texts });
        let resp: EmbeddingResponse = self.post("embeddings", &body)?;
        if resp.data.len() != texts.len() {
            return Err(ProviderError::Integrity(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        let mut data = resp.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}

impl ChatModel for OpenAiCompatClient {
    fn tag(&self) -> String {
        format!("openai-compat:{}", self.cfg.model)
    }

    fn complete(&self, messages: &[ChatMessage], temperature: f32) -> Result<String, ProviderError> {
        let body = ChatRequest {
            model: &self.cfg.model,
            messages,
            temperature,
        };
        let resp: ChatResponse = self.post("chat/completions", &body)?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| ProviderError::Integrity("response has no choices".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves the canned (status, body) responses in order, one per
    /// connection, and returns the request bodies it saw.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut auth_seen = false;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization: bearer sk-test") {
                        auth_seen = true;
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(format!("auth={auth_seen} {}", String::from_utf8(buf).unwrap()));
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (addr, handle)
    }

    fn client(base: String) -> OpenAiCompatClient {
        OpenAiCompatClient::new(
            HttpConfig {
                base_url: base,
                model: "m1".into(),
                api_key: Some("sk-test".into()),
                timeout: Duration::from_secs(5),
                dim: None,
            },
            Arc::new(RateLimiter::unlimited()),
        )
        .unwrap()
    }

    #[test]
    fn embeddings_wire_format() {
        let body = r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#;
        let (base, h) = serve(vec![(200, body.into())]);
        let out = client(base).embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let seen = h.join().unwrap();
        assert_eq!(seen[0], r#"auth=true {"input":["a","b"],"model":"m1"}"#);
    }

    #[test]
    fn chat_wire_format() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"1. alpha"}}]}"#;
        let (base, h) = serve(vec![(200, body.into())]);
        let out = client(base)
            .complete(&[ChatMessage::user("hi")], 0.0)
            .unwrap();
        assert_eq!(out, "1. alpha");
        let seen = h.join().unwrap();
        assert_eq!(
            seen[0],
            r#"auth=true {"model":"m1","messages":[{"role":"user","content":"hi"}],"temperature":0.0}"#
        );
    }

    #[test]
    fn status_classification() {
        let (base, h) = serve(vec![
            (503, "busy".into()),
            (400, "bad".into()),
            (200, "{}".into()),
        ]);
        let c = client(base);
        let msgs = [ChatMessage::user("x")];
        assert!(c.complete(&msgs, 0.0).unwrap_err().is_retryable());
        assert!(matches!(c.complete(&msgs, 0.0), Err(ProviderError::Rejected(_))));
        assert!(matches!(c.complete(&msgs, 0.0), Err(ProviderError::Integrity(_))));
        h.join().unwrap();
    }

    #[test]
    fn connection_refused_is_retryable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let err = client(base).embed(&["a".into()]).unwrap_err();
        assert!(err.is_retryable());
    }
}
