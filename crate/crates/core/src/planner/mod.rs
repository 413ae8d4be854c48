//! Score planning with a chat-completion model.
//!
//! [`plan`] sends one OpenAI-style chat request whose system message is the
//! versioned template in `assets/`, pulls the first JSON object out of the
//! reply and validates it as a [`Score`]. If the reply is unusable the model
//! gets exactly one chance to repair it, with the problems quoted back.
//!
//! The transport is a trait so tests and offline tools can substitute a
//! canned reply for the network.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{load_score_with, validate_score, ParseMode, Score, ValidationOptions, MAX_TRANSITION_SECONDS};

pub const PROMPT_TEMPLATE: &str = include_str!("../../assets/plan_prompt.v1.txt");
pub const PROMPT_TEMPLATE_VERSION: &str = "v1";

pub const DEFAULT_MAX_SEGMENTS: usize = 12;
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com";
pub const DEFAULT_MODEL: &str = "gpt-4o-mini";
/// Environment variable the CLI reads the API key from.
pub const API_KEY_ENV: &str = "SEGUE_API_KEY";
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(60);
pub const CHAT_TEMPERATURE: f64 = 0.2;
/// Allowed relative deviation of a plan's length from the requested one.
pub const DURATION_TOLERANCE: f64 = 0.10;

const COMPLETIONS_PATH: &str = "/v1/chat/completions";

#[derive(Clone, PartialEq)]
pub struct PlanRequest {
    pub description: String,
    pub total_duration_seconds: f64,
    pub max_segments: usize,
    /// Base URL of the server, or a full `.../chat/completions` URL.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
}

impl fmt::Debug for PlanRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlanRequest")
            .field("description", &self.description)
            .field("total_duration_seconds", &self.total_duration_seconds)
            .field("max_segments", &self.max_segments)
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl PlanRequest {
    pub fn new(description: impl Into<String>, total_duration_seconds: f64) -> Self {
        Self {
            description: description.into(),
            total_duration_seconds,
            max_segments: DEFAULT_MAX_SEGMENTS,
            endpoint: DEFAULT_ENDPOINT.into(),
            model: DEFAULT_MODEL.into(),
            api_key: None,
        }
    }

    /// The URL requests are posted to.
    pub fn completions_url(&self) -> Result<String> {
        let url = url::Url::parse(&self.endpoint)
            .map_err(|e| Error::Parameter(format!("endpoint {:?}: {e}", self.endpoint)))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(Error::Parameter(format!(
                "endpoint {:?} must be http or https",
                self.endpoint
            )));
        }
        if url.path().trim_end_matches('/').ends_with("/chat/completions") {
            return Ok(url.to_string());
        }
        Ok(format!("{}{COMPLETIONS_PATH}", url.as_str().trim_end_matches('/')))
    }

    /// Loopback hosts may be used without an API key.
    pub fn is_local_endpoint(&self) -> bool {
        let Ok(url) = url::Url::parse(&self.endpoint) else {
            return false;
        };
        match url.host() {
            Some(url::Host::Domain(d)) => d == "localhost" || d.ends_with(".localhost"),
            Some(url::Host::Ipv4(ip)) => ip.is_loopback() || ip.is_unspecified(),
            Some(url::Host::Ipv6(ip)) => ip.is_loopback() || ip.is_unspecified(),
            None => false,
        }
    }

    /// Checks the request itself, without requiring an API key.
    pub fn check_inputs(&self) -> Result<()> {
        if self.description.trim().is_empty() {
            return Err(Error::Parameter("description is empty".into()));
        }
        if !(self.total_duration_seconds.is_finite() && self.total_duration_seconds > 0.0) {
            return Err(Error::Parameter(format!(
                "total duration must be positive, got {}",
                self.total_duration_seconds
            )));
        }
        if self.max_segments == 0 {
            return Err(Error::Parameter("max_segments must be at least 1".into()));
        }
        if self.model.trim().is_empty() {
            return Err(Error::Parameter("model name is empty".into()));
        }
        self.completions_url()?;
        Ok(())
    }

    /// Everything that can be checked without the network.
    pub fn validate(&self) -> Result<()> {
        self.check_inputs()?;
        let has_key = self.api_key.as_deref().is_some_and(|k| !k.trim().is_empty());
        if !has_key && !self.is_local_endpoint() {
            return Err(Error::Parameter(format!(
                "no API key for {}; set {API_KEY_ENV}",
                self.endpoint
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

/// Request body of a chat completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ChatCall<'a> {
    pub url: &'a str,
    pub api_key: Option<&'a str>,
    pub body: &'a ChatRequest,
}

/// Sends one chat completion and returns the assistant's message text.
pub trait ChatTransport {
    fn complete(&self, call: &ChatCall<'_>) -> Result<String>;
}

impl<T: ChatTransport + ?Sized> ChatTransport for &T {
    fn complete(&self, call: &ChatCall<'_>) -> Result<String> {
        (**self).complete(call)
    }
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(REQUEST_TIMEOUT)
    }
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, call: &ChatCall<'_>) -> Result<String> {
        let mut req = self
            .agent
            .post(call.url)
            .header("Content-Type", "application/json");
        if let Some(key) = call.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = req
            .send_json(call.body)
            .map_err(|e| Error::Http(format!("{}: {e}", call.url)))?;
        let status = response.status();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Http(format!("reading reply: {e}")))?;
        if !status.is_success() {
            let snippet: String = body.chars().take(300).collect();
            return Err(Error::Http(format!("{} returned {status}: {snippet}", call.url)));
        }
        parse_chat_response(&body)
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion reply.
pub fn parse_chat_response(body: &str) -> Result<String> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| Error::Http(format!("reply is not JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(serde_json::Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| Error::Http("reply has no choices[0].message.content".into()))
}

pub fn system_prompt(request: &PlanRequest) -> String {
    PROMPT_TEMPLATE
        .replace("{{max_segments}}", &request.max_segments.to_string())
        .replace("{{total_duration}}", &request.total_duration_seconds.to_string())
        .replace("{{max_transition}}", &MAX_TRANSITION_SECONDS.to_string())
}

pub fn user_prompt(request: &PlanRequest) -> String {
    format!(
        "Request: {:?}, {} seconds, at most {} segments.\nReply:",
        request.description.trim(),
        request.total_duration_seconds,
        request.max_segments
    )
}

/// The first chat request [`plan`] would send; also what `--dry-run` prints.
pub fn build_request(request: &PlanRequest) -> ChatRequest {
    ChatRequest {
        model: request.model.clone(),
        messages: vec![
            ChatMessage::new("system", system_prompt(request)),
            ChatMessage::new("user", user_prompt(request)),
        ],
        temperature: CHAT_TEMPERATURE,
    }
}

/// The first balanced `{...}` in `text` that parses as JSON.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(offset) = text[from..].find('{') {
        let start = from + offset;
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(start) {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        let candidate = &text[start..=i];
                        if serde_json::from_str::<serde_json::Value>(candidate).is_ok() {
                            return Some(candidate);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
        from = start + 1;
    }
    None
}

/// Everything wrong with a reply, as lines to quote back to the model.
fn check_reply(reply: &str, request: &PlanRequest) -> std::result::Result<(Score, Vec<String>), Vec<String>> {
    let json = extract_json_object(reply).ok_or_else(|| vec!["no JSON object found in the reply".to_string()])?;
    let loaded = load_score_with(json.as_bytes(), ParseMode::Lenient).map_err(|e| vec![e.to_string()])?;
    let score = loaded.score;
    let mut problems: Vec<String> = validate_score(&score, &ValidationOptions::default())
        .into_iter()
        .filter(|d| d.is_error())
        .map(|d| d.to_string())
        .collect();
    if score.segments.len() > request.max_segments {
        problems.push(format!(
            "{} segments exceeds the maximum of {}",
            score.segments.len(),
            request.max_segments
        ));
    }
    let total = score.total_seconds();
    let wanted = request.total_duration_seconds;
    if (total - wanted).abs() > DURATION_TOLERANCE * wanted {
        problems.push(format!(
            "segment durations add up to {total} s but {wanted} s was requested"
        ));
    }
    if problems.is_empty() {
        let ignored = loaded
            .ignored_keys
            .into_iter()
            .map(|k| format!("ignored unknown key {k}"))
            .collect();
        Ok((score, ignored))
    } else {
        Err(problems)
    }
}

fn repair_prompt(problems: &[String]) -> String {
    let mut out = String::from("That score has problems:\n");
    for p in problems {
        out.push_str("- ");
        out.push_str(p);
        out.push('\n');
    }
    out.push_str("Reply with the corrected JSON object only.");
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub score: Score,
    /// Chat requests sent: 1, or 2 when a repair was needed.
    pub requests: usize,
    pub warnings: Vec<String>,
}

/// Plans a score. Never returns a score that fails validation.
pub fn plan<T: ChatTransport>(request: &PlanRequest, transport: T) -> Result<Plan> {
    request.validate()?;
    let url = request.completions_url()?;
    let mut body = build_request(request);
    let call = |body: &ChatRequest| {
        transport.complete(&ChatCall {
            url: &url,
            api_key: request.api_key.as_deref(),
            body,
        })
    };

    let first = call(&body)?;
    let problems = match check_reply(&first, request) {
        Ok((score, warnings)) => {
            return Ok(Plan {
                score,
                requests: 1,
                warnings,
            })
        }
        Err(problems) => problems,
    };
    log::info!("plan needs repair: {}", problems.join("; "));
    body.messages.push(ChatMessage::new("assistant", first));
    body.messages.push(ChatMessage::new("user", repair_prompt(&problems)));
    let second = call(&body)?;
    match check_reply(&second, request) {
        Ok((score, warnings)) => Ok(Plan {
            score,
            requests: 2,
            warnings,
        }),
        Err(problems) => Err(Error::Planner(format!(
            "reply still invalid after one repair: {}",
            problems.join("; ")
        ))),
    }
}

/// Rescales segment durations to sum to `total_duration_seconds`, then
/// shrinks any transition that no longer fits to half its shorter neighbor.
pub fn clamp_plan(score: &Score, total_duration_seconds: f64) -> Score {
    let mut out = score.clone();
    let sum = score.total_seconds();
    if sum <= 0.0 || !total_duration_seconds.is_finite() || total_duration_seconds <= 0.0 {
        return out;
    }
    if (sum - total_duration_seconds).abs() > 1e-9 * total_duration_seconds {
        let factor = total_duration_seconds / sum;
        for seg in &mut out.segments {
            seg.duration_seconds *= factor;
        }
    }
    for (i, t) in out.transitions.iter_mut().enumerate() {
        let (Some(before), Some(after)) = (out.segments.get(i), out.segments.get(i + 1)) else {
            break;
        };
        let shorter = before.duration_seconds.min(after.duration_seconds);
        if t.duration_seconds >= shorter {
            t.duration_seconds = shorter / 2.0;
        }
    }
    out
}
