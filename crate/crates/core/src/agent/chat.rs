//! Chat-completion backend and the LLM-driven agent policy.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::{
    pseudo_query, AgentError, AgentPolicy, AgentProfile, AgentTools, Evidence, Instruction, PolicyOutput, Role,
    TurnContext, TurnPayload,
};
use crate::text::truncate_chars;
use crate::tools::ToolRequest;
use crate::transport::{Request, RetryPolicy, Secret, Transport, TransportError};

pub const DEFAULT_TEMPERATURE: f64 = 0.3;

pub const TURN_SCHEMA: &str = r#"{"message": str, "suggestions": [{"item_id": str, "rationale": str, "confidence": num}], "critiques": [{"item_id": str, "stance": "support"|"contest", "reason": str}]}"#;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChatParams {
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self { temperature: DEFAULT_TEMPERATURE, max_tokens: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatCompletion {
    pub text: String,
    pub retries: u32,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ChatError {
    #[error("no messages to send")]
    EmptyMessages,
    #[error("chat backend unavailable after {retries} retries: {source}")]
    BackendUnavailable { retries: u32, source: TransportError },
    #[error("context too long: ~{estimated} tokens exceeds budget {budget}")]
    ContextTooLong { estimated: usize, budget: usize },
    #[error("bad chat response: {0}")]
    BadResponse(String),
    #[error("unparseable output ({error}): {excerpt}")]
    UnparseableTurn { excerpt: String, error: String },
}

pub trait ChatBackend: Send + Sync {
    /// Prompt budget in estimated tokens, if the backend has one.
    fn context_budget(&self) -> Option<usize> {
        None
    }

    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<ChatCompletion, ChatError>;
}

/// Rough prompt size: a quarter token per character plus per-message overhead.
pub fn estimate_tokens(messages: &[ChatMessage]) -> usize {
    messages
        .iter()
        .map(|m| m.content.chars().count().div_ceil(4) + m.role.len().div_ceil(4) + 4)
        .sum()
}

/// Sends `messages` after the local size guard.
pub fn chat_complete(
    client: &dyn ChatBackend,
    messages: &[ChatMessage],
    params: &ChatParams,
) -> Result<ChatCompletion, ChatError> {
    if messages.is_empty() {
        return Err(ChatError::EmptyMessages);
    }
    let estimated = estimate_tokens(messages);
    if let Some(budget) = client.context_budget() {
        if estimated > budget {
            return Err(ChatError::ContextTooLong { estimated, budget });
        }
    }
    let request_chars: usize = messages.iter().map(|m| m.content.len()).sum();
    let out = client.complete(messages, params)?;
    tracing::debug!(request_chars, response_chars = out.text.len(), retries = out.retries, "chat completion");
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ChatClientConfig {
    pub base_url: String,
    pub model: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub api_key: Option<Secret>,
    pub context_tokens: Option<usize>,
}

/// `POST {base_url}/chat/completions`, first choice's message content.
pub struct HttpChatClient {
    config: ChatClientConfig,
    transport: Arc<dyn Transport>,
}

impl HttpChatClient {
    pub fn new(config: ChatClientConfig, transport: Arc<dyn Transport>) -> Self {
        Self { config, transport }
    }
}

impl ChatBackend for HttpChatClient {
    fn context_budget(&self) -> Option<usize> {
        self.config.context_tokens
    }

    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<ChatCompletion, ChatError> {
        let request = Request {
            url: format!("{}/chat/completions", self.config.base_url.trim_end_matches('/')),
            bearer: self.config.api_key.clone(),
            body: json!({
                "model": self.config.model,
                "messages": messages,
                "temperature": params.temperature,
                "max_tokens": params.max_tokens,
            }),
            timeout: self.config.timeout,
        };
        let outcome = self
            .config
            .retry
            .run("chat", || self.transport.post_json(&request))
            .map_err(|(source, retries)| ChatError::BackendUnavailable { retries, source })?;
        let text = outcome.value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ChatError::BadResponse("missing choices[0].message.content".into()))?;
        Ok(ChatCompletion { text: text.to_string(), retries: outcome.retries })
    }
}

/// Canned replies in order, then `fallback` forever (or an error).
#[derive(Default)]
pub struct StubChat {
    replies: Mutex<VecDeque<String>>,
    fallback: Option<String>,
    budget: Option<usize>,
    seen: Mutex<Vec<Vec<ChatMessage>>>,
}

impl StubChat {
    pub fn echo(reply: impl Into<String>) -> Self {
        Self { fallback: Some(reply.into()), ..Default::default() }
    }

    pub fn sequence(replies: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            ..Default::default()
        }
    }

    pub fn with_budget(mut self, tokens: usize) -> Self {
        self.budget = Some(tokens);
        self
    }

    pub fn calls(&self) -> Vec<Vec<ChatMessage>> {
        self.seen.lock().unwrap().clone()
    }
}

impl ChatBackend for StubChat {
    fn context_budget(&self) -> Option<usize> {
        self.budget
    }

    fn complete(&self, messages: &[ChatMessage], _: &ChatParams) -> Result<ChatCompletion, ChatError> {
        self.seen.lock().unwrap().push(messages.to_vec());
        let text = self
            .replies
            .lock()
            .unwrap()
            .pop_front()
            .or_else(|| self.fallback.clone())
            .ok_or_else(|| ChatError::BackendUnavailable {
                retries: 0,
                source: TransportError::Connect("stub exhausted".into()),
            })?;
        Ok(ChatCompletion { text, retries: 0 })
    }
}

/// The JSON object inside a reply, tolerating code fences and chatter
/// around it.
fn json_span(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

pub fn parse_json_reply<T: DeserializeOwned>(raw: &str) -> Result<T, ChatError> {
    let excerpt = || truncate_chars(raw.trim(), 160);
    let span = json_span(raw).ok_or_else(|| ChatError::UnparseableTurn {
        excerpt: excerpt(),
        error: "no JSON object found".into(),
    })?;
    serde_json::from_str(span).map_err(|e| ChatError::UnparseableTurn { excerpt: excerpt(), error: e.to_string() })
}

pub fn parse_agent_output(raw: &str) -> Result<TurnPayload, ChatError> {
    parse_json_reply(raw)
}

/// Asks, parses, and on a parse failure re-prompts once with the schema
/// and the error before giving up.
pub fn complete_structured<T: DeserializeOwned>(
    client: &dyn ChatBackend,
    mut messages: Vec<ChatMessage>,
    params: &ChatParams,
    schema: &str,
) -> Result<T, ChatError> {
    let first = chat_complete(client, &messages, params)?;
    let err = match parse_json_reply(&first.text) {
        Ok(v) => return Ok(v),
        Err(e) => e,
    };
    tracing::warn!(error = %err, "structured reply failed to parse, repairing");
    messages.push(ChatMessage::assistant(first.text));
    messages.push(ChatMessage::user(format!(
        "Your reply could not be parsed: {err}. Reply with only a JSON object of the form {schema}."
    )));
    let second = chat_complete(client, &messages, params)?;
    parse_json_reply(&second.text)
}

/// LLM agent: one retrieval per turn chosen by role (when budget allows),
/// then the model writes the turn in the wire format.
pub struct ChatPolicy {
    backend: Arc<dyn ChatBackend>,
    params: ChatParams,
}

impl ChatPolicy {
    pub fn new(backend: Arc<dyn ChatBackend>, params: ChatParams) -> Self {
        Self { backend, params }
    }

    fn retrieval_request(profile: &AgentProfile, ctx: &TurnContext) -> ToolRequest {
        match &profile.evidence {
            Evidence::Item { relevance, .. } if *relevance >= ctx.tau => ToolRequest::RetrieveByItem {
                item_id: profile.subject_id.clone(),
                k: ctx.k.max(1),
                exclude: ctx.exclude.clone(),
            },
            _ => {
                let query = match profile.role {
                    Role::UserAgent => pseudo_query(&ctx.query, &profile.top_category_names()),
                    _ => ctx.query.clone(),
                };
                ToolRequest::RetrieveByQuery { query, k: ctx.k.max(1), exclude: ctx.exclude.clone() }
            }
        }
    }
}

impl AgentPolicy for ChatPolicy {
    fn name(&self) -> &str {
        "chat"
    }

    fn step(
        &self,
        profile: &AgentProfile,
        instruction: &Instruction,
        ctx: &TurnContext,
        tools: &mut AgentTools<'_>,
    ) -> Result<PolicyOutput, AgentError> {
        let mut fresh = Vec::new();
        if let Some(result) = tools.call(Self::retrieval_request(profile, ctx)) {
            fresh = result
                .map_err(|e| AgentError::PolicyFailure(format!("retrieval failed: {e}")))?
                .scored_items();
        }
        let listing = fresh
            .iter()
            .chain(ctx.own_evidence.iter())
            .take(2 * ctx.k.max(1))
            .filter_map(|s| {
                let item = tools.toolset().retrieval().catalog().item(&s.item_id)?;
                Some(format!("- {} | {} | {} | score {:.3}", s.item_id, item.title, item.category, s.score))
            })
            .collect::<Vec<_>>()
            .join("\n");
        let draft = ctx
            .draft
            .entries
            .iter()
            .map(|e| format!("{} ({:.3})", e.item_id, e.score))
            .collect::<Vec<_>>()
            .join(", ");
        let system = format!(
            "You are {} in a recommendation discussion for user {}.\n{}\nAnswer with only a JSON object of the form {}.",
            profile.agent_id, ctx.target_user, profile.profile_text, TURN_SCHEMA
        );
        let user = format!(
            "Query: {}\nRound {}. Directive: {:?}. Focus: {}\nGuidance: {}\nCurrent draft: {}\nDiscussion so far:\n{}\nRetrieved candidates:\n{}",
            ctx.query,
            instruction.round,
            instruction.directive,
            instruction.focus_items.join(", "),
            instruction.guidance_text,
            draft,
            ctx.transcript_digest,
            listing
        );
        let payload: TurnPayload = complete_structured(
            self.backend.as_ref(),
            vec![ChatMessage::system(system), ChatMessage::user(user)],
            &self.params,
            TURN_SCHEMA,
        )
        .map_err(|e| AgentError::PolicyFailure(e.to_string()))?;
        Ok(PolicyOutput { payload, evidence: fresh })
    }
}
