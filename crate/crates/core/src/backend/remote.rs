//! Client for OpenAI-compatible `/v1/chat/completions` servers.
//!
//! Images travel as base64 PNG data URLs. Token logprobs are always
//! requested; a response without them is an error, since perplexity cannot
//! be computed otherwise.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, FinishReason, GenParams, GenerationResult, TokenLogprob};
use crate::imageops::encode_wire;
use crate::prompting::{PromptContext, Role, Segment};

const COMPLETIONS_PATH: &str = "/v1/chat/completions";
const MODELS_PATH: &str = "/v1/models";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub url: String,
    pub model: String,
    pub timeout_s: u64,
    pub max_inflight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    /// Send echo-scoring requests for forced answers. Servers without
    /// support should leave this off; scoring then reports unsupported.
    pub echo_scoring: bool,
    pub api_key: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000".into(),
            model: "default".into(),
            timeout_s: 120,
            max_inflight: 8,
            max_retries: 3,
            backoff_ms: 250,
            echo_scoring: false,
            api_key: None,
        }
    }
}

/// Counting semaphore capping concurrent requests.
struct InflightCap {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InflightCap);

impl InflightCap {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    cap: InflightCap,
}

enum Attempt {
    Done(u16, String),
    Retry(BackendError),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        let cap = InflightCap::new(config.max_inflight);
        Self { config, agent, cap }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}{path}", self.config.url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut req = self
            .agent
            .post(&self.endpoint(COMPLETIONS_PATH))
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        match req.send(body.as_bytes()) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                match resp.body_mut().read_to_string() {
                    Ok(text) if status >= 500 || status == 429 => Attempt::Retry(
                        BackendError::Unavailable(format!("HTTP {status}: {}", truncate(&text))),
                    ),
                    Ok(text) => Attempt::Done(status, text),
                    Err(e) => Attempt::Retry(transport_error(e)),
                }
            }
            Err(e) => Attempt::Retry(transport_error(e)),
        }
    }

    /// POSTs `body`, retrying transport failures and 5xx/429 with
    /// exponential backoff. Returns status and body of the final response.
    fn post(&self, body: &Value) -> Result<(u16, String), BackendError> {
        let body = body.to_string();
        let _permit = self.cap.acquire();
        let mut last = BackendError::Unavailable("no attempt made".into());
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(
                    self.config.backoff_ms.saturating_mul(1 << (attempt - 1)),
                ));
            }
            match self.attempt(&body) {
                Attempt::Done(status, text) => return Ok((status, text)),
                Attempt::Retry(e) => {
                    log::warn!("backend attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(last)
    }

    fn request_body(&self, ctx: &PromptContext, params: &GenParams) -> Result<Value, BackendError> {
        Ok(json!({
            "model": self.config.model,
            "messages": wire_messages(ctx)?,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "logprobs": true,
            "top_logprobs": 0,
        }))
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn transport_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        other => BackendError::Unavailable(other.to_string()),
    }
}

fn wire_messages(ctx: &PromptContext) -> Result<Vec<Value>, BackendError> {
    ctx.turns()
        .iter()
        .map(|turn| {
            let role = match turn.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            if turn.role == Role::Assistant {
                let text: String = turn.segments.iter().filter_map(Segment::as_text).collect();
                return Ok(json!({ "role": role, "content": text }));
            }
            let parts = turn
                .segments
                .iter()
                .map(|seg| match seg {
                    Segment::Text(t) => Ok(json!({ "type": "text", "text": t })),
                    Segment::Image(img) => Ok(json!({
                        "type": "image_url",
                        "image_url": { "url": encode_wire(img)?.data_url() },
                    })),
                })
                .collect::<Result<Vec<_>, BackendError>>()?;
            Ok(json!({ "role": role, "content": parts }))
        })
        .collect()
}

fn parse_tokens(entries: &[Value]) -> Result<Vec<TokenLogprob>, BackendError> {
    entries
        .iter()
        .map(|entry| {
            let token = entry["token"]
                .as_str()
                .ok_or_else(|| BackendError::Protocol("logprob entry without token".into()))?;
            let lp = entry["logprob"]
                .as_f64()
                .ok_or_else(|| BackendError::Protocol("logprob entry without logprob".into()))?;
            // servers occasionally report tiny positive values for p ~= 1
            TokenLogprob::new(token, lp.min(0.0))
        })
        .collect()
}

/// Extracts text, tokens and finish reason from a chat-completions body.
pub(crate) fn parse_completion(body: &str) -> Result<GenerationResult, BackendError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
    let choice = &v["choices"][0];
    if choice.is_null() {
        return Err(BackendError::Protocol("response has no choices".into()));
    }
    let text = choice["message"]["content"]
        .as_str()
        .ok_or_else(|| BackendError::Protocol("choice has no message content".into()))?
        .to_owned();
    let entries = choice["logprobs"]["content"]
        .as_array()
        .ok_or(BackendError::MissingLogprobs)?;
    let tokens = parse_tokens(entries)?;
    let finish_reason = match choice["finish_reason"].as_str() {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    Ok(GenerationResult {
        text,
        tokens,
        finish_reason,
    })
}

impl Backend for RemoteBackend {
    fn id(&self) -> String {
        format!("remote:{}@{}", self.config.model, self.config.url)
    }

    fn generate(
        &self,
        ctx: &PromptContext,
        params: &GenParams,
    ) -> Result<GenerationResult, BackendError> {
        let body = self.request_body(ctx, params)?;
        let (status, text) = self.post(&body)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Protocol(format!(
                "HTTP {status}: {}",
                truncate(&text)
            )));
        }
        parse_completion(&text)
    }

    /// Echo-scores the answer as a trailing assistant message. The answer
    /// tokens are the suffix of the echoed logprobs that spells it out.
    fn score(
        &self,
        ctx: &PromptContext,
        forced_answer: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        if forced_answer.is_empty() {
            return Err(BackendError::InvalidRequest("forced answer is empty".into()));
        }
        if !self.config.echo_scoring {
            return Err(BackendError::UnsupportedByServer);
        }
        let mut body = self.request_body(ctx, &GenParams { max_tokens: 1, temperature: 0.0 })?;
        body["messages"]
            .as_array_mut()
            .expect("messages is an array")
            .push(json!({ "role": "assistant", "content": forced_answer }));
        body["echo"] = json!(true);
        body["add_generation_prompt"] = json!(false);
        body["continue_final_message"] = json!(true);
        let (status, text) = self.post(&body)?;
        if matches!(status, 400 | 404 | 422 | 501) {
            return Err(BackendError::UnsupportedByServer);
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Protocol(format!("HTTP {status}: {}", truncate(&text))));
        }
        let v: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let entries = v["choices"][0]["logprobs"]["content"]
            .as_array()
            .ok_or(BackendError::UnsupportedByServer)?;
        let tokens = parse_tokens(entries)?;
        answer_suffix(tokens, forced_answer).ok_or(BackendError::UnsupportedByServer)
    }

    fn probe(&self) -> Result<(), BackendError> {
        match self.agent.get(&self.endpoint(MODELS_PATH)).call() {
            Ok(_) => Ok(()),
            Err(e) => Err(transport_error(e)),
        }
    }
}

/// Shortest token suffix whose concatenation ends with the answer (up to
/// surrounding whitespace), scanning back from the last token.
fn answer_suffix(tokens: Vec<TokenLogprob>, answer: &str) -> Option<Vec<TokenLogprob>> {
    let target = answer.trim();
    let mut acc = String::new();
    for start in (0..tokens.len()).rev() {
        acc.insert_str(0, &tokens[start].token);
        if acc.trim() == target {
            return Some(tokens[start..].to_vec());
        }
        if acc.trim_start().len() > target.len() + 16 {
            break;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(t: &str, lp: f64) -> TokenLogprob {
        TokenLogprob::new(t, lp).unwrap()
    }

    #[test]
    fn parses_openai_response() {
        let body = r#"{"choices":[{"index":0,"message":{"role":"assistant","content":"red car"},
            "logprobs":{"content":[{"token":"red","logprob":-0.5,"top_logprobs":[]},
                                   {"token":" car","logprob":1e-9,"top_logprobs":[]}]},
            "finish_reason":"stop"}]}"#;
        let r = parse_completion(body).unwrap();
        assert_eq!(r.text, "red car");
        assert_eq!(r.tokens, [tok("red", -0.5), tok(" car", 0.0)]);
        assert_eq!(r.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn missing_logprobs_detected() {
        let body = r#"{"choices":[{"message":{"content":"red"},"logprobs":null,"finish_reason":"stop"}]}"#;
        assert!(matches!(parse_completion(body), Err(BackendError::MissingLogprobs)));
        assert!(matches!(parse_completion("{}"), Err(BackendError::Protocol(_))));
        assert!(matches!(parse_completion("not json"), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn suffix_extraction() {
        let toks = vec![tok("USER", -1.0), tok(":", -1.0), tok(" dark", -0.3), tok(" blue", -0.2)];
        let s = answer_suffix(toks.clone(), "dark blue").unwrap();
        assert_eq!(s, [tok(" dark", -0.3), tok(" blue", -0.2)]);
        assert!(answer_suffix(toks, "green").is_none());
    }

    #[test]
    fn wire_message_layout() {
        use crate::imageops::ImageBuf;
        use crate::prompting::{build_box_query, extend_micro};
        use std::sync::Arc;
        let img = Arc::new(ImageBuf::filled(2, 2, [5; 3]));
        let q1 = build_box_query(img.clone(), "where?").unwrap();
        let ctx = extend_micro(&q1, "(0.1, 0.1, 0.5, 0.5)", img, "where?").unwrap();
        let msgs = wire_messages(&ctx).unwrap();
        assert_eq!(msgs.len(), 3);
        assert_eq!(msgs[0]["content"][0]["type"], "image_url");
        assert!(msgs[0]["content"][0]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        assert_eq!(msgs[1], json!({"role": "assistant", "content": "(0.1, 0.1, 0.5, 0.5)"}));
        assert_eq!(msgs[2]["content"][1]["type"], "text");
    }

    #[test]
    fn inflight_cap_blocks_at_limit() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let cap = Arc::new(InflightCap::new(2));
        let peak = Arc::new(AtomicUsize::new(0));
        let live = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (cap, peak, live) = (cap.clone(), peak.clone(), live.clone());
                thread::spawn(move || {
                    let _p = cap.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
