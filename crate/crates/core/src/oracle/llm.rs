use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{JudgeRequest, Oracle, PresentedPair, RawJudgement, Slot};
use crate::error::{AplError, Result};
use crate::vocab::Vocabulary;

pub const JUDGE_TOKEN_ENV: &str = "APL_JUDGE_TOKEN";

const SENTIMENT_SYSTEM: &str = include_str!("../../assets/templates/sentiment.system.txt");
const SENTIMENT_USER: &str = include_str!("../../assets/templates/sentiment.user.txt");
const SUMMARIZATION_SYSTEM: &str = include_str!("../../assets/templates/summarization.system.txt");
const SUMMARIZATION_USER: &str = include_str!("../../assets/templates/summarization.user.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    Sentiment,
    Summarization,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

/// Fills the judge template. The sentiment template uses `{{PROMPT}}`,
/// `{{COMPLETION-A}}`, `{{COMPLETION-B}}`; the summarization template uses
/// `{PROMPT}`, `{COMPLETION_A}`, `{COMPLETION_B}`.
pub fn render_template(template: TemplateId, prompt: &str, completion_a: &str, completion_b: &str) -> RenderedPrompt {
    let (system, user, keys) = match template {
        TemplateId::Sentiment => (
            SENTIMENT_SYSTEM,
            SENTIMENT_USER,
            ["{{PROMPT}}", "{{COMPLETION-A}}", "{{COMPLETION-B}}"],
        ),
        TemplateId::Summarization => (
            SUMMARIZATION_SYSTEM,
            SUMMARIZATION_USER,
            ["{PROMPT}", "{COMPLETION_A}", "{COMPLETION_B}"],
        ),
    };
    // single pass so substituted text is never re-scanned for placeholders
    let mut out = String::with_capacity(user.len() + prompt.len() + completion_a.len() + completion_b.len());
    let mut rest = user;
    'outer: while !rest.is_empty() {
        for (key, value) in keys.iter().zip([prompt, completion_a, completion_b]) {
            if rest.starts_with(key) {
                out.push_str(value);
                rest = &rest[key.len()..];
                continue 'outer;
            }
        }
        let ch = rest.chars().next().unwrap();
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    RenderedPrompt {
        system: system.to_string(),
        user: out,
    }
}

fn preferred_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"Preferred:\s*"?([AB])"?"#).unwrap())
}

/// Extracts the choice from the last `Preferred:` line and the text of the
/// `Comparison:` line.
pub fn parse_judge_response(text: &str) -> Result<(Slot, Option<String>)> {
    let choice = text
        .lines()
        .rev()
        .find_map(|l| preferred_re().captures(l))
        .map(|c| if &c[1] == "A" { Slot::A } else { Slot::B })
        .ok_or_else(|| AplError::ParseFailure {
            message: "no `Preferred: A|B` line".into(),
            raw: text.to_string(),
        })?;
    let rationale = text
        .lines()
        .rev()
        .find_map(|l| l.trim_start().strip_prefix("Comparison:"))
        .map(|s| s.trim().to_string());
    Ok((choice, rationale))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Network(String),
    Status(u16, String),
    Malformed(String),
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Network(e) => write!(f, "network error: {e}"),
            TransportError::Status(code, body) => write!(f, "HTTP {code}: {body}"),
            TransportError::Malformed(e) => write!(f, "malformed response: {e}"),
        }
    }
}

/// Sends one chat-completion request body and returns the assistant message text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, body: &Value) -> std::result::Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeEndpoint {
    /// e.g. `https://api.example.com/v1`; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_token_env() -> String {
    JUDGE_TOKEN_ENV.to_string()
}

fn default_timeout_secs() -> u64 {
    60
}

/// Blocking HTTP transport speaking the common chat-completions JSON shape.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: &JudgeEndpoint) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| AplError::OracleUnavailable(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/')),
            token: std::env::var(&endpoint.token_env).ok(),
        })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, body: &Value) -> std::result::Result<String, TransportError> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status(status.as_u16(), text));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| TransportError::Malformed(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| TransportError::Malformed(format!("no choices[0].message.content in {text}")))
    }
}

/// Remote LLM judge. Network failures are retried with exponential backoff
/// (`max_attempts` total); an unparseable answer is re-asked once.
pub struct LlmJudge {
    transport: Box<dyn ChatTransport>,
    pub model: String,
    pub template: TemplateId,
    pub temperature: f64,
    pub vocab: Vocabulary,
    pub max_attempts: usize,
    pub backoff: Duration,
    pub parallelism: usize,
    id: String,
}

impl LlmJudge {
    pub fn new(
        transport: Box<dyn ChatTransport>,
        model: impl Into<String>,
        template: TemplateId,
        temperature: f64,
        vocab: Vocabulary,
    ) -> Self {
        let model = model.into();
        Self {
            id: format!("llm:{model}"),
            transport,
            model,
            template,
            temperature,
            vocab,
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            parallelism: 4,
        }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn request_body(&self, req: &JudgeRequest) -> Value {
        let r = render_template(req.template_id, &req.prompt, &req.completion_a, &req.completion_b);
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": r.system},
                {"role": "user", "content": r.user},
            ],
            "temperature": req.temperature,
        })
    }

    fn send_with_retry(&self, body: &Value) -> Result<String> {
        let mut delay = self.backoff;
        let mut last = None;
        for attempt in 0..self.max_attempts {
            match self.transport.complete(body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("judge request attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                    if attempt + 1 < self.max_attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(AplError::OracleUnavailable(format!(
            "{} attempts failed, last: {}",
            self.max_attempts,
            last.map(|e| e.to_string()).unwrap_or_default()
        )))
    }

    /// Sends one rendered request and parses the preferred slot.
    pub fn judge_request(&self, req: &JudgeRequest) -> Result<RawJudgement> {
        let started = Instant::now();
        let body = self.request_body(req);
        let first = self.send_with_retry(&body)?;
        let parsed = match parse_judge_response(&first) {
            Ok(p) => p,
            Err(_) => {
                let second = self.send_with_retry(&body)?;
                parse_judge_response(&second)?
            }
        };
        Ok(RawJudgement {
            choice: parsed.0,
            rationale: parsed.1,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

impl Oracle for LlmJudge {
    fn id(&self) -> &str {
        &self.id
    }

    fn choose(&self, item: &PresentedPair) -> Result<RawJudgement> {
        self.judge_request(&item.to_request(&self.vocab, self.template, self.temperature))
    }

    fn choose_batch(&self, items: &[PresentedPair]) -> Vec<Result<RawJudgement>> {
        let width = self.parallelism.max(1);
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(width) {
            let results: Vec<Result<RawJudgement>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|item| s.spawn(move || self.choose(item))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(AplError::OracleUnavailable("judge worker panicked".into()))))
                    .collect()
            });
            out.extend(results);
        }
        out
    }
}
