//! Turns a matched concept into a natural-language explanation: renders the
//! prompt, samples the concept members shown to the model, and posts a
//! chat-completion request.

use std::collections::{HashSet, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attribution::TaskKind;
use crate::concept_discoverer::ConceptMember;
use crate::error::{LacoatError, Result};
use crate::repr_store::RepresentationBundle;

pub const API_KEY_ENV: &str = "LACOAT_LLM_API_KEY";
pub const BASE_URL_ENV: &str = "LACOAT_LLM_BASE_URL";

pub const CLASSIFICATION_TEMPLATE: &str = "Do you find any common semantic, structural, lexical and topical relation between these sentences with the main sentence? Give a more specific and concise summary about the most prominent relation among these sentences.

main sentence: {sentence}
{sentences}
No talk, just go.";

pub const LABELING_TEMPLATE: &str = "Do you find any common semantic, structural, lexical and topical relation between the word highlighted in the sentence (enclosed in [[ ]]) and the following list of words? Give a more specific and concise summary about the most prominent relation among these words.

Sentence: {sentence}
List of words: {words}
Answer concisely and to the point.";

pub const DEFAULT_DISPLAY_COUNT: usize = 5;
pub const DEFAULT_WORD_CAP: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TaskKind,
    pub text: &'static str,
}

impl PromptTemplate {
    pub fn for_task(kind: TaskKind) -> Self {
        let text = match kind {
            TaskKind::SequenceClassification => CLASSIFICATION_TEMPLATE,
            TaskKind::SequenceLabeling | TaskKind::MaskedPrediction => LABELING_TEMPLATE,
        };
        Self { kind, text }
    }

    /// Fills `{name}` slots in a single left-to-right pass, so slot-like text
    /// inside values is never substituted again.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String> {
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut rest = self.text;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let close = rest[open..]
                .find('}')
                .map(|c| open + c)
                .ok_or_else(|| LacoatError::invalid("unterminated template slot"))?;
            let name = &rest[open + 1..close];
            let value = values
                .iter()
                .find(|(slot, _)| *slot == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| LacoatError::invalid(format!("template slot `{name}` left unfilled")))?;
            out.push_str(value);
            rest = &rest[close + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptDisplay {
    pub record: usize,
    /// Full sentence for classifier tokens, the word itself otherwise.
    pub text: String,
    pub is_sentence: bool,
    pub sentence: String,
}

/// Up to `n` members to show for a concept; every member when the concept is
/// small enough. Output is ordered by record index.
pub fn sample_concept_display(
    members: &[ConceptMember<'_>],
    bundle: &RepresentationBundle,
    n: usize,
    seed: u64,
) -> Vec<ConceptDisplay> {
    let mut chosen: Vec<&ConceptMember<'_>> = if members.len() <= n {
        members.iter().collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, members.len(), n)
            .into_iter()
            .map(|i| &members[i])
            .collect()
    };
    chosen.sort_by_key(|m| m.index);
    chosen
        .into_iter()
        .map(|m| {
            let sentence = bundle.sentence_text(m.record.sentence_id);
            ConceptDisplay {
                record: m.index,
                text: if m.record.is_classifier_token {
                    sentence.clone()
                } else {
                    m.record.token_text.clone()
                },
                is_sentence: m.record.is_classifier_token,
                sentence,
            }
        })
        .collect()
}

/// Distinct member words in record order, at most `cap` of them.
pub fn concept_word_list(members: &[ConceptMember<'_>], cap: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    members
        .iter()
        .filter(|m| !m.record.is_classifier_token)
        .map(|m| m.record.token_text.as_str())
        .filter(|w| seen.insert(*w))
        .take(cap)
        .map(str::to_string)
        .collect()
}

/// Everything the prompt may contain. Predictions and gold labels are
/// deliberately absent from this type.
#[derive(Debug, Clone)]
pub struct PromptInput<'a> {
    /// Words of the instance sentence, classifier token excluded.
    pub sentence_tokens: &'a [String],
    /// Index into `sentence_tokens` of the word to wrap in `[[ ]]`.
    pub highlight: Option<usize>,
    /// Concept sentences (classification) or words (labeling).
    pub concept_items: &'a [String],
}

pub fn build_prompt(kind: TaskKind, input: &PromptInput<'_>) -> Result<String> {
    let template = PromptTemplate::for_task(kind);
    match kind {
        TaskKind::SequenceClassification => {
            let sentence = input.sentence_tokens.join(" ");
            let sentences = input.concept_items.join("\n");
            template.render(&[("sentence", &sentence), ("sentences", &sentences)])
        }
        TaskKind::SequenceLabeling | TaskKind::MaskedPrediction => {
            let h = input
                .highlight
                .ok_or_else(|| LacoatError::invalid("labeling prompt needs a highlighted word"))?;
            if h >= input.sentence_tokens.len() {
                return Err(LacoatError::invalid(format!(
                    "highlight {h} outside a {}-word sentence",
                    input.sentence_tokens.len()
                )));
            }
            let sentence = input
                .sentence_tokens
                .iter()
                .enumerate()
                .map(|(i, w)| if i == h { format!("[[{w}]]") } else { w.clone() })
                .collect::<Vec<_>>()
                .join(" ");
            let words = input.concept_items.join(", ");
            template.render(&[("sentence", &sentence), ("words", &words)])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    /// Use the in-process mock instead of HTTP.
    pub mock: bool,
    pub model: String,
    /// Falls back to `LACOAT_LLM_BASE_URL`.
    pub base_url: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            mock: true,
            model: "gpt-3.5-turbo".into(),
            base_url: None,
            temperature: 0.0,
            top_p: 0.95,
            retries: 2,
            backoff_ms: 500,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRequest {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub prompt: String,
}

impl ExplanationRequest {
    pub fn new(settings: &LlmSettings, endpoint: impl Into<String>, prompt: String) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: settings.model.clone(),
            temperature: settings.temperature,
            top_p: settings.top_p,
            prompt,
        }
    }

    pub fn body(&self) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": self.prompt}],
            "temperature": self.temperature,
            "top_p": self.top_p,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportResponse {
    pub status: u16,
    pub body: String,
}

pub trait ChatTransport: Send + Sync {
    /// Sends one request. `Err` means the request never got a status back.
    fn post(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<TransportResponse>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LacoatError::Transport {
                status: None,
                message: e.to_string(),
            })?;
        Ok(Self { client })
    }
}

impl ChatTransport for HttpTransport {
    fn post(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<TransportResponse> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LacoatError::Transport {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| LacoatError::Transport {
            status: Some(status),
            message: e.to_string(),
        })?;
        Ok(TransportResponse { status, body })
    }
}

#[derive(Debug, Clone)]
pub enum MockReply {
    Content(String),
    Status(u16, String),
    Disconnect,
}

/// In-process transport: plays back scripted replies, then a fixed answer,
/// and keeps every request body it saw.
pub struct MockTransport {
    script: Mutex<VecDeque<MockReply>>,
    fallback: String,
    requests: Mutex<Vec<Value>>,
}

impl MockTransport {
    pub fn canned(answer: impl Into<String>) -> Self {
        Self {
            script: Mutex::new(VecDeque::new()),
            fallback: answer.into(),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn scripted(replies: impl IntoIterator<Item = MockReply>, fallback: impl Into<String>) -> Self {
        Self {
            script: Mutex::new(replies.into_iter().collect()),
            fallback: fallback.into(),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<Value> {
        self.requests.lock().unwrap().clone()
    }

    pub fn completion_body(content: &str) -> String {
        json!({
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
        })
        .to_string()
    }
}

impl ChatTransport for MockTransport {
    fn post(&self, _url: &str, _api_key: Option<&str>, body: &Value) -> Result<TransportResponse> {
        self.requests.lock().unwrap().push(body.clone());
        let reply = self
            .script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| MockReply::Content(self.fallback.clone()));
        match reply {
            MockReply::Content(text) => Ok(TransportResponse {
                status: 200,
                body: Self::completion_body(&text),
            }),
            MockReply::Status(status, body) => Ok(TransportResponse { status, body }),
            MockReply::Disconnect => Err(LacoatError::Transport {
                status: None,
                message: "connection reset (mock)".into(),
            }),
        }
    }
}

fn is_retryable(status: u16) -> bool {
    matches!(status, 408 | 429 | 500..=599)
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff: Duration,
}

impl RetryPolicy {
    pub fn from_settings(s: &LlmSettings) -> Self {
        Self {
            retries: s.retries,
            backoff: Duration::from_millis(s.backoff_ms),
        }
    }
}

/// Posts the request and returns the first choice's message content. Transient
/// failures are retried with exponential backoff.
pub fn query_llm(
    transport: &dyn ChatTransport,
    request: &ExplanationRequest,
    api_key: Option<&str>,
    policy: RetryPolicy,
) -> Result<String> {
    let body = request.body();
    let mut attempt = 0u32;
    loop {
        let outcome = transport.post(&request.endpoint, api_key, &body);
        let retryable_error = match outcome {
            Ok(resp) if (200..300).contains(&resp.status) => return parse_completion(&resp.body),
            Ok(resp) if !is_retryable(resp.status) => {
                return Err(LacoatError::Transport {
                    status: Some(resp.status),
                    message: truncate(&resp.body, 200),
                })
            }
            Ok(resp) => LacoatError::Transport {
                status: Some(resp.status),
                message: truncate(&resp.body, 200),
            },
            Err(e) => e,
        };
        if attempt >= policy.retries {
            return Err(retryable_error);
        }
        std::thread::sleep(policy.backoff.saturating_mul(1 << attempt.min(16)));
        attempt += 1;
    }
}

fn truncate(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

pub fn parse_completion(body: &str) -> Result<String> {
    let value: Value = serde_json::from_str(body).map_err(|e| LacoatError::ResponseParse(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| LacoatError::ResponseParse("missing choices[0].message.content".into()))
}

/// `<base>/chat/completions`, with the base taken from settings or the environment.
pub fn resolve_endpoint(settings: &LlmSettings) -> Result<String> {
    let base = match &settings.base_url {
        Some(b) => b.clone(),
        None => std::env::var(BASE_URL_ENV).map_err(|_| {
            LacoatError::invalid(format!("no LLM base URL configured; set {BASE_URL_ENV}"))
        })?,
    };
    Ok(format!("{}/chat/completions", base.trim_end_matches('/')))
}
