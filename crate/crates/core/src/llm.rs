//! Chat-completion client, a deterministic mock, and the parser that turns a
//! free-text response back into candidate item ids.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use crate::error::{Error, Result};
use crate::promptgen::{EMPTY_LIST, HINT1_PREFIX, LIST_SEPARATOR, ORIGINAL_QUESTION_PREFIX, QUESTION_PREFIX};

pub const ENV_URL: &str = "KERAG_LLM_URL";
pub const ENV_KEY: &str = "KERAG_LLM_KEY";
pub const CHAT_PATH: &str = "/v1/chat/completions";

/// Fraction of tokens two titles must share to count as the same title.
pub const MATCH_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceParams {
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub max_tokens: u32,
    pub model_name: String,
    pub endpoint_url: String,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub retries: u32,
    #[serde(with = "duration_secs")]
    pub backoff_base: Duration,
    /// Concurrent requests allowed by callers that fan out.
    pub max_in_flight: usize,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            top_k: 40,
            top_p: 0.1,
            max_tokens: 256,
            model_name: "kerag".into(),
            endpoint_url: "http://127.0.0.1:8000".into(),
            timeout: Duration::from_secs(120),
            retries: 3,
            backoff_base: Duration::from_millis(500),
            max_in_flight: 8,
        }
    }
}

impl InferenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anything that turns a prompt into response text.
pub trait Completer: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;

    /// Short description recorded in run fingerprints.
    fn describe(&self) -> String;
}

/// Blocking client for an OpenAI-compatible chat-completion endpoint.
#[derive(Debug)]
pub struct HttpCompleter {
    client: reqwest::blocking::Client,
    params: InferenceParams,
    api_key: Option<String>,
    send_top_k: AtomicBool,
}

impl HttpCompleter {
    pub fn new(params: InferenceParams, api_key: Option<String>) -> Result<Self> {
        params.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(params.timeout)
            .build()
            .map_err(|e| Error::Endpoint {
                status: None,
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            client,
            params,
            api_key,
            send_top_k: AtomicBool::new(true),
        })
    }

    /// Reads the endpoint and bearer token from `KERAG_LLM_URL` and
    /// `KERAG_LLM_KEY` when set.
    pub fn from_env(mut params: InferenceParams) -> Result<Self> {
        if let Ok(url) = std::env::var(ENV_URL) {
            params.endpoint_url = url;
        }
        let key = std::env::var(ENV_KEY).ok().filter(|k| !k.is_empty());
        Self::new(params, key)
    }

    pub fn params(&self) -> &InferenceParams {
        &self.params
    }

    fn url(&self) -> String {
        format!("{}{CHAT_PATH}", self.params.endpoint_url.trim_end_matches('/'))
    }

    pub fn request_body(&self, prompt: &str, with_top_k: bool) -> Value {
        let mut body = json!({
            "model": self.params.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.params.temperature,
            "top_p": self.params.top_p,
            "max_tokens": self.params.max_tokens,
        });
        if with_top_k {
            body["top_k"] = json!(self.params.top_k);
        }
        body
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let delay = self.params.backoff_base.saturating_mul(1 << attempt.min(16));
        delay.min(Duration::from_secs(30))
    }
}

enum Attempt {
    Done(String),
    Retry(Option<u16>, String),
    Fatal(Option<u16>, String),
    RejectedTopK,
}

impl HttpCompleter {
    fn attempt(&self, prompt: &str, with_top_k: bool) -> Attempt {
        let mut req = self.client.post(self.url()).json(&self.request_body(prompt, with_top_k));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(None, e.to_string()),
        };
        let status = resp.status();
        let code = Some(status.as_u16());
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(code, e.to_string()),
        };
        if status.is_success() {
            return match extract_content(&text) {
                Some(content) => Attempt::Done(content),
                None => Attempt::Fatal(code, format!("no message content in response: {text}")),
            };
        }
        if with_top_k && (status.as_u16() == 400 || status.as_u16() == 422) && text.contains("top_k") {
            return Attempt::RejectedTopK;
        }
        if status.as_u16() == 429 || status.is_server_error() {
            Attempt::Retry(code, text)
        } else {
            Attempt::Fatal(code, text)
        }
    }
}

impl Completer for HttpCompleter {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let with_top_k = self.send_top_k.load(Ordering::Relaxed);
            match self.attempt(prompt, with_top_k) {
                Attempt::Done(text) => return Ok(text),
                Attempt::RejectedTopK => {
                    warn!("endpoint rejected top_k; sending requests without it");
                    self.send_top_k.store(false, Ordering::Relaxed);
                    // Not counted against the retry budget.
                    attempts -= 1;
                }
                Attempt::Fatal(status, message) => {
                    return Err(Error::Endpoint {
                        status,
                        attempts,
                        message,
                    })
                }
                Attempt::Retry(status, message) => {
                    if attempts > self.params.retries {
                        return Err(Error::Endpoint {
                            status,
                            attempts,
                            message,
                        });
                    }
                    let delay = self.backoff(attempts - 1);
                    debug!(attempts, ?status, ?delay, "retrying completion");
                    thread::sleep(delay);
                }
            }
        }
    }

    fn describe(&self) -> String {
        format!("http:{}#{}", self.params.endpoint_url, self.params.model_name)
    }
}

fn extract_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    let choice = v.get("choices")?.get(0)?;
    choice
        .get("message")
        .and_then(|m| m.get("content"))
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    /// First five titles of the Hint 1 ranking.
    EchoHint,
    /// First five titles of the reversed candidate list.
    Reverse,
    /// Text that names no candidate.
    Garbage,
}

impl std::str::FromStr for MockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "echo_hint" | "echo" => Ok(MockMode::EchoHint),
            "reverse" => Ok(MockMode::Reverse),
            "garbage" => Ok(MockMode::Garbage),
            other => Err(Error::Config(format!("unknown mock mode `{other}`"))),
        }
    }
}

pub const GARBAGE_RESPONSE: &str = "As a language model I would rather not rank films today.\nPerhaps try again later!";

fn split_list(text: &str) -> Vec<String> {
    if text == EMPTY_LIST {
        return Vec::new();
    }
    text.split(LIST_SEPARATOR).map(str::to_string).collect()
}

/// Title lists recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLists {
    pub candidates: Vec<String>,
    pub hint: Option<Vec<String>>,
}

pub fn parse_prompt_lists(prompt: &str) -> Result<PromptLists> {
    let mut candidates = None;
    let mut hint = None;
    for line in prompt.lines() {
        if let Some(rest) = line.strip_prefix(QUESTION_PREFIX) {
            candidates = rest.strip_suffix('?').map(split_list);
        } else if let Some(rest) = line.strip_prefix(HINT1_PREFIX) {
            hint = rest.strip_suffix('.').map(split_list);
        } else if let Some(rest) = line.strip_prefix(ORIGINAL_QUESTION_PREFIX) {
            candidates = rest.strip_suffix('?').map(split_list);
        }
    }
    let candidates = candidates.ok_or_else(|| Error::PromptParse("no candidate list".into()))?;
    Ok(PromptLists { candidates, hint })
}

pub fn mock_complete(prompt: &str, mode: MockMode) -> Result<String> {
    match mode {
        MockMode::Garbage => Ok(GARBAGE_RESPONSE.to_string()),
        MockMode::EchoHint => {
            let hint = parse_prompt_lists(prompt)?
                .hint
                .ok_or_else(|| Error::PromptParse("no Hint 1 section".into()))?;
            Ok(hint.into_iter().take(5).collect::<Vec<_>>().join("\n"))
        }
        MockMode::Reverse => {
            let lists = parse_prompt_lists(prompt)?;
            Ok(lists.candidates.into_iter().rev().take(5).collect::<Vec<_>>().join("\n"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockCompleter {
    pub mode: MockMode,
}

impl Completer for MockCompleter {
    fn complete(&self, prompt: &str) -> Result<String> {
        mock_complete(prompt, self.mode)
    }

    fn describe(&self) -> String {
        format!("mock:{:?}", self.mode)
    }
}

/// Items recovered from a response, in response order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub user_id: usize,
    pub titles: Vec<String>,
    pub resolved_items: Vec<usize>,
    pub unparsed_lines: Vec<String>,
    /// Items appended from the hint ranking after parsing.
    pub padded: usize,
}

impl RankedList {
    /// Appends hint-order items until `k` items are present. Returns whether
    /// anything was added.
    pub fn pad_from(&mut self, hint: &[(usize, String)], k: usize) -> bool {
        let before = self.resolved_items.len();
        for (item, title) in hint {
            if self.resolved_items.len() >= k {
                break;
            }
            if !self.resolved_items.contains(item) {
                self.resolved_items.push(*item);
                self.titles.push(title.clone());
            }
        }
        self.padded += self.resolved_items.len() - before;
        self.resolved_items.len() > before
    }
}

/// Lower-cases, drops parenthesised years, turns punctuation into spaces
/// and collapses whitespace.
pub fn normalize_title(text: &str) -> String {
    let lower = text.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    let chars: Vec<char> = lower.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '(' && i + 5 < chars.len() && chars[i + 1..i + 5].iter().all(char::is_ascii_digit) && chars[i + 5] == ')' {
            i += 6;
            out.push(' ');
            continue;
        }
        let c = chars[i];
        out.push(if c.is_alphanumeric() { c } else { ' ' });
        i += 1;
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn tokens(normalized: &str) -> HashSet<&str> {
    normalized.split(' ').filter(|t| !t.is_empty()).collect()
}

/// Jaccard overlap of the normalised token sets.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let (na, nb) = (normalize_title(a), normalize_title(b));
    let (ta, tb) = (tokens(&na), tokens(&nb));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

fn strip_marker(line: &str) -> &str {
    let mut s = line.trim();
    s = s.trim_start_matches(['-', '*', '•', '+', '#']).trim_start();
    let digits = s.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(r) = rest.strip_prefix(['.', ')', ':']) {
            s = r.trim_start();
        }
    }
    s.trim_matches(|c| c == '"' || c == '*').trim()
}

fn whitespace_fold(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Resolves response lines to candidate items. Each line is matched exactly
/// (case- and whitespace-insensitive) first, then by best token overlap at
/// or above [`MATCH_THRESHOLD`]. Later mentions of an already-matched item
/// are ignored.
pub fn parse_ranking(response: &str, candidates: &[(usize, String)], user_id: usize) -> RankedList {
    let exact: Vec<String> = candidates.iter().map(|(_, t)| whitespace_fold(t)).collect();
    let normalized: Vec<String> = candidates.iter().map(|(_, t)| normalize_title(t)).collect();
    let mut out = RankedList {
        user_id,
        ..Default::default()
    };

    let pieces = response
        .lines()
        .flat_map(|l| l.split(LIST_SEPARATOR))
        .map(str::trim)
        .filter(|l| !l.is_empty());
    for raw in pieces {
        // Titles such as "2001: A Space Odyssey" look like a numbered line,
        // so the unstripped text gets the first chance at an exact match.
        let piece = strip_marker(raw);
        if piece.is_empty() {
            continue;
        }
        let folded_raw = whitespace_fold(raw);
        let folded = whitespace_fold(piece);
        let hit = exact.iter().position(|t| *t == folded_raw).or_else(|| exact.iter().position(|t| *t == folded)).or_else(|| {
            let np = normalize_title(piece);
            let tp = tokens(&np);
            let mut best: Option<(usize, f64)> = None;
            for (c, nc) in normalized.iter().enumerate() {
                let tc = tokens(nc);
                let union = tp.union(&tc).count();
                if union == 0 {
                    continue;
                }
                let score = tp.intersection(&tc).count() as f64 / union as f64;
                if score >= MATCH_THRESHOLD && best.is_none_or(|(_, s)| score > s) {
                    best = Some((c, score));
                }
            }
            best.map(|(c, _)| c)
        });
        match hit {
            Some(c) => {
                let (item, title) = &candidates[c];
                if !out.resolved_items.contains(item) {
                    out.resolved_items.push(*item);
                    out.titles.push(title.clone());
                }
            }
            None => out.unparsed_lines.push(piece.to_string()),
        }
    }
    out
}
