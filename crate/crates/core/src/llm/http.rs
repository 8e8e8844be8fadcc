//! OpenAI-compatible chat-completions backend.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::error::{Error, Result};

use super::{Conversation, FeedbackItem, Hypothesis, LabelPair, LabelProbabilities, LlmBackend, Speaker};

/// A transport failure; transient ones are retried.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportError {
    pub transient: bool,
    pub message: String,
}

/// Moves one JSON request to the endpoint and returns the JSON reply.
pub trait Transport: Send + Sync {
    fn post_json(&self, endpoint: &Endpoint, body: &Value) -> std::result::Result<Value, TransportError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Endpoint {
    pub url: String,
    pub api_key: Option<String>,
}

/// Blocking transport over `ureq`.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, endpoint: &Endpoint, body: &Value) -> std::result::Result<Value, TransportError> {
        let mut req = self.agent.post(&endpoint.url);
        if let Some(key) = &endpoint.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let classify = |e: ureq::Error| {
            let transient = match &e {
                ureq::Error::StatusCode(code) => *code == 429 || *code >= 500,
                ureq::Error::Io(_) | ureq::Error::Timeout(_) | ureq::Error::HostNotFound => true,
                _ => false,
            };
            TransportError {
                transient,
                message: e.to_string(),
            }
        };
        let mut resp = req.send_json(body).map_err(classify)?;
        resp.body_mut().read_json::<Value>().map_err(classify)
    }
}

/// Replays canned responses in order and records every request body.
#[derive(Default)]
pub struct FixtureTransport {
    responses: Mutex<VecDeque<std::result::Result<Value, TransportError>>>,
    requests: Mutex<Vec<Value>>,
}

impl FixtureTransport {
    pub fn new(responses: impl IntoIterator<Item = std::result::Result<Value, TransportError>>) -> Self {
        FixtureTransport {
            responses: Mutex::new(responses.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Load `{"responses": [...]}`; entries with an `"error"` key become
    /// transport errors (`"transient": true|false`).
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)?;
        let items = doc
            .get("responses")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse("fixture needs a `responses` array".into()))?;
        Ok(Self::new(items.iter().map(|item| match item.get("error") {
            Some(msg) => Err(TransportError {
                transient: item.get("transient").and_then(Value::as_bool).unwrap_or(true),
                message: msg.as_str().unwrap_or("error").to_string(),
            }),
            None => Ok(item.clone()),
        })))
    }

    pub fn requests(&self) -> Vec<Value> {
        self.requests.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.responses.lock().unwrap().len()
    }
}

impl Transport for FixtureTransport {
    fn post_json(&self, _endpoint: &Endpoint, body: &Value) -> std::result::Result<Value, TransportError> {
        self.requests.lock().unwrap().push(body.clone());
        self.responses.lock().unwrap().pop_front().unwrap_or_else(|| {
            Err(TransportError {
                transient: false,
                message: "fixture exhausted".into(),
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub top_logprobs: u32,
    pub max_attempts: u32,
    pub base_delay: Duration,
    /// Minimum spacing between calls; `None` disables rate limiting.
    pub min_interval: Option<Duration>,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            url: url.into(),
            model: model.into(),
            api_key: None,
            top_logprobs: 20,
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            min_interval: None,
            timeout: Duration::from_secs(60),
        }
    }

    /// Read `IRDA_LLM_URL`, `IRDA_LLM_MODEL` and optional `IRDA_LLM_KEY`.
    pub fn from_env() -> Result<Self> {
        let var = |name: &str| std::env::var(name).map_err(|_| Error::Config(format!("{name} is not set")));
        let mut cfg = HttpConfig::new(var("IRDA_LLM_URL")?, var("IRDA_LLM_MODEL")?);
        cfg.api_key = std::env::var("IRDA_LLM_KEY").ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }
}

pub struct HttpBackend<T: Transport> {
    config: HttpConfig,
    transport: T,
    last_call: Mutex<Option<Instant>>,
}

impl HttpBackend<UreqTransport> {
    pub fn from_config(config: HttpConfig) -> Self {
        let transport = UreqTransport::new(config.timeout);
        HttpBackend::new(config, transport)
    }
}

fn backend_err(msg: impl Into<String>) -> Error {
    Error::Backend(msg.into())
}

impl<T: Transport> HttpBackend<T> {
    pub fn new(config: HttpConfig, transport: T) -> Self {
        HttpBackend {
            config,
            transport,
            last_call: Mutex::new(None),
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn post(&self, body: &Value) -> Result<Value> {
        let endpoint = Endpoint {
            url: self.config.url.clone(),
            api_key: self.config.api_key.clone(),
        };
        let mut last_error = String::new();
        for attempt in 0..self.config.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.config.base_delay * 2u32.pow(attempt - 1));
            }
            let result = {
                // holding the lock serializes calls when rate limiting is on
                let mut last = self.last_call.lock().unwrap();
                if let (Some(min), Some(prev)) = (self.config.min_interval, *last) {
                    let elapsed = prev.elapsed();
                    if elapsed < min {
                        std::thread::sleep(min - elapsed);
                    }
                }
                let result = self.transport.post_json(&endpoint, body);
                *last = Some(Instant::now());
                result
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.transient => last_error = e.message,
                Err(e) => return Err(backend_err(e.message)),
            }
        }
        Err(backend_err(format!(
            "giving up after {} attempts: {last_error}",
            self.config.max_attempts
        )))
    }

    fn messages(&self, env_desc: &str, conversation: &Conversation) -> Vec<Value> {
        let mut out = Vec::with_capacity(conversation.len() + 1);
        for (i, turn) in conversation.turns().iter().enumerate() {
            let role = match turn.role {
                Speaker::System => "system",
                Speaker::User => "user",
                Speaker::Assistant => "assistant",
            };
            let content = if i == 0 && !turn.text.contains(env_desc) {
                format!("{env_desc}\n{}", turn.text)
            } else {
                turn.text.clone()
            };
            out.push(json!({"role": role, "content": content}));
        }
        out
    }

    fn label_request(&self, mut messages: Vec<Value>, instruction: String) -> Value {
        messages.push(json!({"role": "user", "content": instruction}));
        json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": true,
            "top_logprobs": self.config.top_logprobs,
        })
    }
}

/// `(token, logprob)` pairs of the first generated token.
fn first_token_logprobs(reply: &Value) -> Result<Vec<(String, f64)>> {
    let top = reply
        .pointer("/choices/0/logprobs/content/0/top_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| backend_err("reply has no first-token top_logprobs"))?;
    top.iter()
        .map(|entry| {
            let token = entry.get("token").and_then(Value::as_str);
            let lp = entry.get("logprob").and_then(Value::as_f64);
            match (token, lp) {
                (Some(t), Some(lp)) => Ok((t.to_string(), lp)),
                _ => Err(backend_err("malformed top_logprobs entry")),
            }
        })
        .collect()
}

/// Probability mass per label: each label takes the tokens that form its
/// longest case-insensitive prefix. Tokens that prefix both labels carry no
/// information and are ignored. `None` when a label matched nothing.
pub fn match_label_masses(top: &[(String, f64)], labels: &LabelPair) -> (Option<f64>, Option<f64>) {
    let a = labels.aligned.to_lowercase();
    let m = labels.misaligned.to_lowercase();
    let mut best: [(usize, f64); 2] = [(0, 0.0), (0, 0.0)];
    for (token, lp) in top {
        let t = token.trim().to_lowercase();
        if t.is_empty() {
            continue;
        }
        let hits = [a.starts_with(&t), m.starts_with(&t)];
        if hits[0] && hits[1] {
            continue;
        }
        for (slot, hit) in best.iter_mut().zip(hits) {
            if !hit {
                continue;
            }
            let len = t.len();
            if len > slot.0 {
                *slot = (len, lp.exp());
            } else if len == slot.0 {
                slot.1 += lp.exp();
            }
        }
    }
    let mass = |(len, p): (usize, f64)| (len > 0).then_some(p);
    (mass(best[0]), mass(best[1]))
}

const SECTION_FEATURES: &str = "FEATURES:";
const SECTION_ALTERNATIVES: &str = "ALTERNATIVES:";
const SECTION_SUMMARY: &str = "SUMMARY:";

/// Parse the structured hypothesis reply (FEATURES / ALTERNATIVES bullet lists
/// and an optional SUMMARY).
pub fn parse_hypothesis(text: &str) -> Result<Hypothesis> {
    let mut section = None;
    let mut features = Vec::new();
    let mut alternatives = Vec::new();
    let mut summary = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        let upper = trimmed.to_uppercase();
        let (header, rest) = [SECTION_FEATURES, SECTION_ALTERNATIVES, SECTION_SUMMARY]
            .into_iter()
            .find(|h| upper.starts_with(h))
            .map(|h| (Some(h), trimmed[h.len()..].trim()))
            .unwrap_or((None, trimmed));
        if header.is_some() {
            section = header;
        }
        if rest.is_empty() {
            continue;
        }
        let item = rest.strip_prefix("- ").or_else(|| rest.strip_prefix("* ")).or_else(|| {
            let digits = rest.chars().take_while(char::is_ascii_digit).count();
            (digits > 0).then(|| rest[digits..].trim_start_matches(['.', ')']).trim_start())
        });
        match (section, item) {
            (Some(SECTION_FEATURES), Some(i)) => features.push(i.trim().to_string()),
            (Some(SECTION_ALTERNATIVES), Some(i)) => alternatives.push(i.trim().to_string()),
            (Some(SECTION_SUMMARY), _) => summary.push(rest.to_string()),
            _ => {}
        }
    }
    let h = Hypothesis {
        features_hypothesized: features,
        alternatives,
        prose: summary.join(" "),
    };
    h.validate()
        .map_err(|_| Error::Parse("reply lacks FEATURES or ALTERNATIVES bullets".into()))?;
    Ok(h)
}

fn reply_text(reply: &Value) -> Result<String> {
    reply
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| backend_err("reply has no message content"))
}

impl<T: Transport> LlmBackend for HttpBackend<T> {
    fn query_label_probs(
        &self,
        env_desc: &str,
        conversation: &Conversation,
        encoded: &str,
        labels: &LabelPair,
    ) -> Result<LabelProbabilities> {
        labels.validate()?;
        let messages = self.messages(env_desc, conversation);
        let prompts = [
            format!(
                "Judge the following example. Answer with one word, `{}` or `{}`.\n{encoded}",
                labels.aligned, labels.misaligned
            ),
            format!(
                "{encoded}\nReply with exactly one of these two words and nothing else: {} {}",
                labels.aligned, labels.misaligned
            ),
        ];
        for prompt in prompts {
            let reply = self.post(&self.label_request(messages.clone(), prompt))?;
            let top = first_token_logprobs(&reply)?;
            match match_label_masses(&top, labels) {
                (None, None) => continue,
                (a, m) => {
                    let mut p = LabelProbabilities::from_masses(a.unwrap_or(0.0), m.unwrap_or(0.0))?;
                    p.raw = top.into_iter().collect::<BTreeMap<_, _>>();
                    return Ok(p);
                }
            }
        }
        Err(backend_err(format!(
            "neither `{}` nor `{}` appeared among the top tokens",
            labels.aligned, labels.misaligned
        )))
    }

    fn generate_hypothesis(&self, env_desc: &str, feedback: &[FeedbackItem]) -> Result<Hypothesis> {
        if feedback.is_empty() {
            return Err(Error::Validation("hypothesis generation needs feedback".into()));
        }
        let examples: Vec<String> = feedback
            .iter()
            .map(|f| {
                format!(
                    "Example {}:\n{}\nExplanation: {}",
                    f.stimulus_id, f.encoded, f.explanation
                )
            })
            .collect();
        let task = format!(
            "{env_desc}\nHere are examples a user judged, with their explanations.\n\n{}\n\n\
             List the features you think the user relies on and alternative features they could consider.\n\
             Use exactly this format:\n{SECTION_FEATURES}\n- <feature>\n{SECTION_ALTERNATIVES}\n- <feature>\n{SECTION_SUMMARY} <one paragraph>",
            examples.join("\n\n")
        );
        let reminder = "Your previous answer did not follow the format. Reply again using the \
                        FEATURES:, ALTERNATIVES: and SUMMARY: sections with `- ` bullets.";
        let mut messages = vec![json!({"role": "user", "content": task})];
        let mut last = String::new();
        for _ in 0..2 {
            let body = json!({
                "model": self.config.model,
                "messages": messages,
                "max_tokens": 512,
                "temperature": 0,
            });
            let text = reply_text(&self.post(&body)?)?;
            match parse_hypothesis(&text) {
                Ok(h) => return Ok(h),
                Err(e) => last = e.to_string(),
            }
            messages.push(json!({"role": "assistant", "content": text}));
            messages.push(json!({"role": "user", "content": reminder}));
        }
        Err(backend_err(format!("unparseable hypothesis after re-prompt: {last}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logprob_reply(pairs: &[(&str, f64)]) -> Value {
        let top: Vec<Value> = pairs
            .iter()
            .map(|(t, p)| json!({"token": t, "logprob": p.ln()}))
            .collect();
        json!({"choices": [{"logprobs": {"content": [{"token": pairs[0].0, "top_logprobs": top}]}}]})
    }

    fn backend(responses: Vec<std::result::Result<Value, TransportError>>) -> HttpBackend<FixtureTransport> {
        let mut cfg = HttpConfig::new("http://fixture", "m");
        cfg.base_delay = Duration::from_millis(1);
        HttpBackend::new(cfg, FixtureTransport::new(responses))
    }

    #[test]
    fn longest_prefix_matching() {
        let labels = LabelPair::new("respectful", "disrespectful");
        let top = vec![
            ("res".to_string(), 0.01f64.ln()),
            ("respect".to_string(), 0.06f64.ln()),
            (" Respect".to_string(), 0.0f64.ln().max(-50.0)),
            ("dis".to_string(), 0.02f64.ln()),
            ("the".to_string(), 0.5f64.ln()),
        ];
        let (a, m) = match_label_masses(&top, &labels);
        assert!((a.unwrap() - 0.06).abs() < 1e-9);
        assert!((m.unwrap() - 0.02).abs() < 1e-12);
        let p = LabelProbabilities::from_masses(a.unwrap(), m.unwrap()).unwrap();
        assert!((p.p_aligned - 0.75).abs() < 1e-6);
    }

    #[test]
    fn shared_prefix_tokens_are_ignored() {
        let labels = LabelPair::new("swerve", "stay");
        let (a, m) = match_label_masses(&[("s".into(), -0.1), ("sw".into(), -2.0)], &labels);
        assert!(a.is_some());
        assert!(m.is_none());
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let labels = LabelPair::new("swerve", "stay");
        let b = backend(vec![
            Err(TransportError {
                transient: true,
                message: "503".into(),
            }),
            Ok(logprob_reply(&[("swerve", 0.3), ("stay", 0.1)])),
        ]);
        let c = Conversation::new("sys", 0);
        let p = b.query_label_probs("env", &c, "x", &labels).unwrap();
        assert!((p.p_aligned - 0.75).abs() < 1e-9);
        assert_eq!(b.transport().requests().len(), 2);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let labels = LabelPair::new("swerve", "stay");
        let err = || {
            Err(TransportError {
                transient: true,
                message: "timeout".into(),
            })
        };
        let b = backend(vec![err(), err(), err(), Ok(logprob_reply(&[("swerve", 0.5)]))]);
        let c = Conversation::new("sys", 0);
        assert!(matches!(
            b.query_label_probs("env", &c, "x", &labels),
            Err(Error::Backend(_))
        ));
        assert_eq!(b.transport().remaining(), 1);
    }

    #[test]
    fn unmatched_labels_requery_then_fail() {
        let labels = LabelPair::new("swerve", "stay");
        let b = backend(vec![
            Ok(logprob_reply(&[("the", 0.9)])),
            Ok(logprob_reply(&[("a", 0.9)])),
        ]);
        let c = Conversation::new("sys", 0);
        assert!(matches!(
            b.query_label_probs("env", &c, "x", &labels),
            Err(Error::Backend(_))
        ));
        assert_eq!(b.transport().requests().len(), 2);
    }

    #[test]
    fn hypothesis_format_and_reprompt() {
        let good = "FEATURES:\n- stays home\nALTERNATIVES:\n- garbage\n- distance\nSUMMARY: fine";
        let b = backend(vec![
            Ok(json!({"choices": [{"message": {"content": "I think they like apples."}}]})),
            Ok(json!({"choices": [{"message": {"content": good}}]})),
        ]);
        let item = FeedbackItem {
            stimulus_id: "t".into(),
            encoded: "x".into(),
            label: true,
            explanation: "ok".into(),
        };
        let h = b.generate_hypothesis("env", &[item]).unwrap();
        assert_eq!(h.features_hypothesized, vec!["stays home"]);
        assert_eq!(h.alternatives, vec!["garbage", "distance"]);
        assert_eq!(h.prose, "fine");
    }
}
