//! OpenAI-compatible HTTP backend.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{Backend, Completion, LmError, LmRequest, TokenDistribution};

pub const ENV_BASE_URL: &str = "OPENAI_BASE_URL";
pub const ENV_API_KEY: &str = "OPENAI_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

/// Token bucket refilled continuously at `requests_per_minute / 60` per second,
/// holding at most one minute's worth of tokens. Zero disables limiting.
pub struct RateLimiter {
    per_second: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: u32) -> Self {
        let capacity = f64::from(requests_per_minute);
        RateLimiter {
            per_second: capacity / 60.0,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        if self.capacity <= 0.0 {
            return;
        }
        loop {
            let wait = {
                let mut st = self.state.lock().expect("limiter lock");
                let now = Instant::now();
                let elapsed = now.duration_since(st.1).as_secs_f64();
                st.0 = (st.0 + elapsed * self.per_second).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.per_second
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Authenticated JSON / multipart transport to an OpenAI-style API root.
pub struct HttpTransport {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
}

impl HttpTransport {
    pub fn new(base_url: &str, api_key: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            agent,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key.to_string(),
        }
    }

    /// Reads the endpoint and key from the environment. A missing key is a
    /// configuration error.
    pub fn from_env(base_url: Option<&str>, timeout: Duration) -> Result<Self, LmError> {
        let key = std::env::var(ENV_API_KEY)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| LmError::Config(format!("{ENV_API_KEY} is not set")))?;
        let url = base_url
            .map(str::to_string)
            .or_else(|| std::env::var(ENV_BASE_URL).ok())
            .unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
        Ok(HttpTransport::new(&url, &key, timeout))
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value, LmError> {
        let payload = serde_json::to_vec(body).expect("json serializes");
        let resp = self
            .agent
            .post(&format!("{}{path}", self.base_url))
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(&payload[..]);
        Self::read(resp)
    }

    /// Uploads `bytes` as a multipart form file alongside plain text fields.
    pub fn post_file(
        &self,
        path: &str,
        fields: &[(&str, &str)],
        file_field: &str,
        filename: &str,
        bytes: &[u8],
    ) -> Result<Value, LmError> {
        let boundary = format!(
            "studysim-{}",
            &crate::domain::content_hash(&[filename])[..24]
        );
        let mut body = Vec::with_capacity(bytes.len() + 512);
        for (name, value) in fields {
            body.extend_from_slice(
                format!(
                    "--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n"
                )
                .as_bytes(),
            );
        }
        body.extend_from_slice(
            format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"{file_field}\"; filename=\"{filename}\"\r\nContent-Type: application/jsonl\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
        let resp = self
            .agent
            .post(&format!("{}{path}", self.base_url))
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header(
                "Content-Type",
                &format!("multipart/form-data; boundary={boundary}"),
            )
            .send(&body[..]);
        Self::read(resp)
    }

    fn read(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<Value, LmError> {
        let mut resp = resp.map_err(classify_transport)?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(classify_transport)?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| LmError::Fatal(format!("malformed response body: {e}"))),
            429 | 500..=599 => Err(LmError::Retryable(format!("HTTP {status}: {text}"))),
            _ => Err(LmError::Fatal(format!(
                "HTTP {status}: {}",
                provider_message(&text)
            ))),
        }
    }
}

fn provider_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v["error"]["message"].as_str().map(str::to_string))
        .unwrap_or_else(|| body.to_string())
}

fn classify_transport(e: ureq::Error) -> LmError {
    match e {
        ureq::Error::Timeout(_)
        | ureq::Error::Io(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound => LmError::Retryable(e.to_string()),
        other => LmError::Fatal(other.to_string()),
    }
}

pub struct OpenAiBackend {
    transport: HttpTransport,
    limiter: RateLimiter,
}

impl OpenAiBackend {
    pub fn new(transport: HttpTransport, requests_per_minute: u32) -> Self {
        OpenAiBackend {
            transport,
            limiter: RateLimiter::new(requests_per_minute),
        }
    }
}

impl Backend for OpenAiBackend {
    fn identity(&self) -> String {
        format!("openai-compatible:{}", self.transport.base_url())
    }

    fn complete(&self, request: &LmRequest) -> Result<Completion, LmError> {
        self.limiter.acquire();
        let mut body = json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "seed": request.seed,
            "max_tokens": request.max_tokens,
        });
        if request.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(request.top_k_logprobs);
        }
        let v = self.transport.post_json("/chat/completions", &body)?;
        parse_chat_response(&v, request.want_logprobs)
    }

    fn embed(&self, model_id: &str, text: &str) -> Result<Vec<f64>, LmError> {
        self.limiter.acquire();
        let v = self
            .transport
            .post_json("/embeddings", &json!({"model": model_id, "input": text}))?;
        v["data"][0]["embedding"]
            .as_array()
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| LmError::Fatal("embedding response missing data[0].embedding".into()))
    }
}

pub(crate) fn parse_chat_response(v: &Value, want_logprobs: bool) -> Result<Completion, LmError> {
    let choice = &v["choices"][0];
    let text = choice["message"]["content"]
        .as_str()
        .ok_or_else(|| LmError::Fatal("response missing choices[0].message.content".into()))?
        .to_string();
    let first_token_distribution = if want_logprobs {
        choice["logprobs"]["content"][0]["top_logprobs"]
            .as_array()
            .map(|alts| {
                TokenDistribution::from_logprobs(alts.iter().filter_map(|a| {
                    Some((a["token"].as_str()?.to_string(), a["logprob"].as_f64()?))
                }))
            })
            .filter(|d| !d.probs.is_empty())
    } else {
        None
    };
    Ok(Completion {
        text,
        first_token_distribution,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves the given (status, body) responses in order, one per connection,
    /// and returns the raw request bodies seen.
    pub(crate) fn serve(
        responses: Vec<(u16, String)>,
    ) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut head = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push(format!("{head}\n{}", String::from_utf8_lossy(&buf)));
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
                stream.flush().unwrap();
            }
            seen
        });
        (addr, handle)
    }

    #[test]
    fn chat_completion_with_logprobs() {
        let body = json!({
            "choices": [{
                "message": {"role": "assistant", "content": "Paris"},
                "logprobs": {"content": [{"token": "Paris", "logprob": -0.1,
                    "top_logprobs": [{"token": "Paris", "logprob": -0.1}, {"token": "Lyon", "logprob": -2.5}]}]}
            }]
        });
        let (addr, h) = serve(vec![(200, body.to_string())]);
        let b = OpenAiBackend::new(HttpTransport::new(&addr, "k", Duration::from_secs(5)), 0);
        let c = b
            .complete(&LmRequest::user("gpt", "capital?", 0.0, 3).with_logprobs(2))
            .unwrap();
        assert_eq!(c.text, "Paris");
        let d = c.first_token_distribution.unwrap();
        assert_eq!(d.token_labels, vec!["Paris", "Lyon"]);
        assert!((d.probs[0] - (-0.1f64).exp()).abs() < 1e-15);
        let seen = h.join().unwrap();
        assert!(seen[0].starts_with("POST /chat/completions"));
        assert!(seen[0].contains("\"top_logprobs\":2"));
        assert!(seen[0]
            .to_ascii_lowercase()
            .contains("authorization: bearer k"));
    }

    #[test]
    fn status_classification() {
        let (addr, h) = serve(vec![
            (429, "{}".into()),
            (400, json!({"error": {"message": "bad model"}}).to_string()),
        ]);
        let t = HttpTransport::new(&addr, "k", Duration::from_secs(5));
        assert!(matches!(
            t.post_json("/x", &json!({})),
            Err(LmError::Retryable(_))
        ));
        match t.post_json("/x", &json!({})) {
            Err(LmError::Fatal(m)) => assert!(m.contains("bad model")),
            other => panic!("{other:?}"),
        }
        h.join().unwrap();
    }

    #[test]
    fn connection_refused_is_retryable() {
        let port = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let t = HttpTransport::new(
            &format!("http://127.0.0.1:{port}"),
            "k",
            Duration::from_secs(2),
        );
        assert!(matches!(
            t.post_json("/x", &json!({})),
            Err(LmError::Retryable(_))
        ));
    }

    #[test]
    fn embeddings_endpoint() {
        let (addr, h) = serve(vec![(
            200,
            json!({"data": [{"embedding": [0.5, -0.5]}]}).to_string(),
        )]);
        let b = OpenAiBackend::new(HttpTransport::new(&addr, "k", Duration::from_secs(5)), 0);
        assert_eq!(b.embed("emb", "hello").unwrap(), vec![0.5, -0.5]);
        assert!(h.join().unwrap()[0].starts_with("POST /embeddings"));
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let l = RateLimiter::new(600); // 10 per second, bucket of 600
        let start = Instant::now();
        for _ in 0..5 {
            l.acquire();
        }
        assert!(start.elapsed() < Duration::from_millis(50));
        let tight = RateLimiter::new(1200);
        {
            let mut st = tight.state.lock().unwrap();
            st.0 = 0.0;
        }
        let start = Instant::now();
        tight.acquire();
        assert!(start.elapsed() >= Duration::from_millis(40));
    }
}
