//! Uniform access to every model role over pluggable backends.
//!
//! The gateway renders prompt templates, invokes the bound backend with
//! retry/backoff on transient failures, logs every attempt to the campaign
//! transcript, and parses structured outputs with a bounded repair-re-prompt
//! budget. A deterministic time source keeps scripted campaigns
//! byte-reproducible.

pub mod backend;
pub mod extract;
pub mod scripted;
pub mod template;
pub mod transcript;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Provenance, Query};
use crate::error::{Error, Result};
use crate::library::{Preference, QueryProfile, Strategy};
use crate::pipeline::CompetitiveContext;

use backend::{BackendFailure, ChatBackend, ChatCall, RateLimiter};
use template::{TemplateStore, RAG_TEMPLATES};
use transcript::{ChatAttempt, ChatExchange, Transcript};

/// The model roles a campaign binds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleKind {
    Attacker,
    Surrogate,
    Judge,
    Paraphraser,
    Target,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_RETRIES: u32 = 3;

/// A role bound to a backend for the duration of a campaign.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRole {
    pub role: RoleKind,
    pub backend_id: String,
    pub temperature: f64,
    pub max_retries: u32,
}

impl ModelRole {
    pub fn new(role: RoleKind, backend_id: impl Into<String>) -> Self {
        ModelRole {
            role,
            backend_id: backend_id.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

/// Attribution attached to every exchange.
#[derive(Debug, Clone, Default)]
pub struct CallCtx {
    pub query_id: Option<String>,
    pub phase: Option<String>,
}

impl CallCtx {
    pub fn for_query(query_id: impl Into<String>) -> Self {
        CallCtx {
            query_id: Some(query_id.into()),
            phase: None,
        }
    }

    pub fn with_phase(mut self, phase: impl Into<String>) -> Self {
        self.phase = Some(phase.into());
        self
    }
}

/// Judge output as a strict boolean plus audit information.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub refusal: bool,
    pub rationale: String,
    /// True when the judge stayed ambiguous and the verdict fell back to
    /// non-refusal.
    pub defaulted: bool,
}

/// Inputs for one candidate-generation call.
pub struct CandidateRequest<'a> {
    pub query: &'a Query,
    pub doc_id: String,
    /// Competitive context rendered as numbered passages.
    pub context_text: String,
    /// Inspiration strategies rendered as a list ("(none)" when empty).
    pub inspiration_text: String,
    /// History rendered to natural language.
    pub history_text: String,
    /// Normalized names already attempted for this query.
    pub used_names: &'a BTreeSet<String>,
    pub preference: Preference,
}

#[derive(Debug, Clone)]
pub struct CandidateOutput {
    pub strategy: Strategy,
    pub document: Document,
    /// Set when the attacker repeated a used strategy name even after the
    /// exploration re-prompt and the candidate was accepted anyway.
    pub name_repeat_accepted: bool,
}

enum TimeSource {
    Wall,
    Logical(AtomicU64),
}

/// Gateway configuration knobs.
#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Use a logical clock: zero latencies, strictly increasing timestamps.
    pub deterministic_time: bool,
    /// Base of the exponential retry backoff; no sleeping in deterministic
    /// mode.
    pub backoff_base_ms: u64,
    /// Accepted candidate document length in words, inclusive.
    pub candidate_word_bounds: (usize, usize),
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            deterministic_time: false,
            backoff_base_ms: 250,
            candidate_word_bounds: (80, 400),
        }
    }
}

pub struct Gateway {
    backends: BTreeMap<String, Arc<dyn ChatBackend>>,
    limiters: BTreeMap<String, RateLimiter>,
    templates: TemplateStore,
    transcript: Arc<Transcript>,
    time: TimeSource,
    config: GatewayConfig,
}

impl Gateway {
    pub fn new(templates: TemplateStore, config: GatewayConfig) -> Self {
        let time = if config.deterministic_time {
            TimeSource::Logical(AtomicU64::new(0))
        } else {
            TimeSource::Wall
        };
        Gateway {
            backends: BTreeMap::new(),
            limiters: BTreeMap::new(),
            templates,
            transcript: Arc::new(Transcript::new()),
            time,
            config,
        }
    }

    pub fn add_backend(&mut self, id: impl Into<String>, backend: Arc<dyn ChatBackend>, requests_per_minute: u32) {
        let id = id.into();
        self.limiters.insert(id.clone(), RateLimiter::new(requests_per_minute));
        self.backends.insert(id, backend);
    }

    pub fn has_backend(&self, id: &str) -> bool {
        self.backends.contains_key(id)
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.templates
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Monotone timestamp: epoch milliseconds, or a logical counter in
    /// deterministic mode.
    pub fn now_ms(&self) -> u64 {
        match &self.time {
            TimeSource::Wall => SystemTime::now()
                .duration_since(SystemTime::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            TimeSource::Logical(counter) => counter.fetch_add(1, Ordering::SeqCst),
        }
    }

    fn deterministic(&self) -> bool {
        matches!(self.time, TimeSource::Logical(_))
    }

    /// Render a template and invoke the role's backend, retrying transient
    /// failures up to `role.max_retries` attempts with exponential backoff.
    /// Every attempt is logged; the exchange is appended to the transcript.
    pub fn chat(
        &self,
        role: &ModelRole,
        template_id: &str,
        bindings: &BTreeMap<String, String>,
        ctx: &CallCtx,
    ) -> Result<ChatExchange> {
        self.chat_inner(role, template_id, bindings, ctx, None, Vec::new())
    }

    fn chat_inner(
        &self,
        role: &ModelRole,
        template_id: &str,
        bindings: &BTreeMap<String, String>,
        ctx: &CallCtx,
        repair_suffix: Option<&str>,
        flags: Vec<String>,
    ) -> Result<ChatExchange> {
        let template = self.templates.get(template_id)?;
        let mut rendered = template.render(bindings)?;
        if let Some(suffix) = repair_suffix {
            rendered.push_str("\n\n");
            rendered.push_str(suffix);
        }
        let backend = self
            .backends
            .get(&role.backend_id)
            .ok_or_else(|| Error::config(format!("role has unbound backend '{}'", role.backend_id)))?;
        let limiter = &self.limiters[&role.backend_id];

        let call = ChatCall {
            template_id,
            bindings,
            rendered_prompt: &rendered,
            temperature: role.temperature,
        };
        let max_attempts = role.max_retries.max(1);
        let mut attempts = Vec::new();
        let started = Instant::now();
        for attempt in 1..=max_attempts {
            limiter.acquire();
            let attempt_start = Instant::now();
            let latency = |s: Instant| {
                if self.deterministic() {
                    0
                } else {
                    s.elapsed().as_millis() as u64
                }
            };
            match backend.invoke(&call) {
                Ok(reply) => {
                    attempts.push(ChatAttempt {
                        outcome: "ok".into(),
                        message: None,
                        latency_ms: latency(attempt_start),
                    });
                    let exchange = ChatExchange {
                        seq: self.transcript.next_seq(),
                        query_id: ctx.query_id.clone(),
                        phase: ctx.phase.clone(),
                        role: role.role,
                        backend_id: role.backend_id.clone(),
                        template_id: template_id.to_string(),
                        template_hash: template.hash.clone(),
                        rendered_prompt: rendered.clone(),
                        response_text: reply.text,
                        tokens_in: reply.tokens_in,
                        tokens_out: reply.tokens_out,
                        latency_ms: latency(started),
                        attempts,
                        flags,
                    };
                    self.transcript.append(exchange.clone());
                    return Ok(exchange);
                }
                Err(BackendFailure::Transient(message)) => {
                    attempts.push(ChatAttempt {
                        outcome: "transient_error".into(),
                        message: Some(message.clone()),
                        latency_ms: latency(attempt_start),
                    });
                    if attempt == max_attempts {
                        // exhausted: log the failed call, then error
                        let exchange = ChatExchange {
                            seq: self.transcript.next_seq(),
                            query_id: ctx.query_id.clone(),
                            phase: ctx.phase.clone(),
                            role: role.role,
                            backend_id: role.backend_id.clone(),
                            template_id: template_id.to_string(),
                            template_hash: template.hash.clone(),
                            rendered_prompt: rendered.clone(),
                            response_text: String::new(),
                            tokens_in: 0,
                            tokens_out: 0,
                            latency_ms: latency(started),
                            attempts,
                            flags: vec!["exhausted_retries".into()],
                        };
                        self.transcript.append(exchange);
                        return Err(Error::Transport {
                            attempts: max_attempts,
                            message,
                        });
                    }
                    if !self.deterministic() && self.config.backoff_base_ms > 0 {
                        let backoff = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1));
                        std::thread::sleep(Duration::from_millis(backoff));
                    }
                }
                Err(BackendFailure::Permanent(message)) => {
                    attempts.push(ChatAttempt {
                        outcome: "backend_error".into(),
                        message: Some(message.clone()),
                        latency_ms: latency(attempt_start),
                    });
                    let exchange = ChatExchange {
                        seq: self.transcript.next_seq(),
                        query_id: ctx.query_id.clone(),
                        phase: ctx.phase.clone(),
                        role: role.role,
                        backend_id: role.backend_id.clone(),
                        template_id: template_id.to_string(),
                        template_hash: template.hash.clone(),
                        rendered_prompt: rendered.clone(),
                        response_text: String::new(),
                        tokens_in: 0,
                        tokens_out: 0,
                        latency_ms: latency(started),
                        attempts,
                        flags: vec!["backend_error".into()],
                    };
                    self.transcript.append(exchange);
                    return Err(Error::Backend(message));
                }
            }
        }
        unreachable!("retry loop returns on every path")
    }

    /// Chat and parse, re-prompting with a repair note up to `repairs`
    /// additional times when `parse` rejects the response.
    fn chat_parsed<T>(
        &self,
        role: &ModelRole,
        template_id: &str,
        bindings: &BTreeMap<String, String>,
        ctx: &CallCtx,
        repairs: u32,
        repair_note: &str,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let mut last_raw = String::new();
        let mut last_problem = String::new();
        for round in 0..=repairs {
            let suffix = if round == 0 {
                None
            } else {
                Some(format!(
                    "Your previous reply could not be used: {last_problem}. {repair_note}"
                ))
            };
            let exchange =
                self.chat_inner(role, template_id, bindings, ctx, suffix.as_deref(), Vec::new())?;
            match parse(&exchange.response_text) {
                Ok(value) => return Ok(value),
                Err(problem) => {
                    last_raw = exchange.response_text;
                    last_problem = problem;
                }
            }
        }
        Err(Error::extraction(
            format!("unparseable after {repairs} repair(s): {last_problem}"),
            last_raw,
        ))
    }

    /// Abstract a query into its structured profile.
    pub fn gen_query_profile(&self, role: &ModelRole, query: &Query, ctx: &CallCtx) -> Result<QueryProfile> {
        let mut bindings = BTreeMap::new();
        bindings.insert("query".to_string(), query.text.clone());
        bindings.insert("query_id".to_string(), query.id.clone());
        self.chat_parsed(
            role,
            "query_profile",
            &bindings,
            ctx,
            2,
            "Reply with only a fenced JSON block containing the fields topic, intent, keywords.",
            |text| {
                let value = extract::extract_json_object(text).ok_or("no JSON object found")?;
                let topic = extract::string_field(&value, "topic").ok_or("missing field 'topic'")?;
                let intent = extract::string_field(&value, "intent").ok_or("missing field 'intent'")?;
                let keywords =
                    extract::string_list_field(&value, "keywords").ok_or("missing field 'keywords'")?;
                QueryProfile::new(topic, intent, keywords).map_err(|e| e.to_string())
            },
        )
    }

    /// Generate the simulated competitive context: exactly `m` pseudo-gold
    /// and `m` distractor passages.
    pub fn gen_competitive_context(
        &self,
        role: &ModelRole,
        query: &Query,
        m: usize,
        ctx: &CallCtx,
    ) -> Result<CompetitiveContext> {
        if m < 1 {
            return Err(Error::validation("m must be >= 1"));
        }
        let mut bindings = BTreeMap::new();
        bindings.insert("query".to_string(), query.text.clone());
        bindings.insert("query_id".to_string(), query.id.clone());
        bindings.insert("m".to_string(), m.to_string());
        let (gold_texts, dist_texts) = self.chat_parsed(
            role,
            "competitive_context",
            &bindings,
            ctx,
            1,
            "Reply with only a fenced JSON block with fields pseudo_gold and distractors, each holding exactly the requested number of passages.",
            |text| {
                let value = extract::extract_json_object(text).ok_or("no JSON object found")?;
                let gold = extract::string_list_field(&value, "pseudo_gold")
                    .ok_or("missing field 'pseudo_gold'")?;
                let dist = extract::string_list_field(&value, "distractors")
                    .ok_or("missing field 'distractors'")?;
                if gold.len() != m || dist.len() != m {
                    return Err(format!(
                        "expected {m} pseudo_gold and {m} distractors, got {} and {}",
                        gold.len(),
                        dist.len()
                    ));
                }
                if gold.iter().chain(&dist).any(|t| t.trim().is_empty()) {
                    return Err("context passages must be non-empty".into());
                }
                Ok((gold, dist))
            },
        )?;
        let pseudo_gold = gold_texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| Document::new(format!("{}-gold-{}", query.id, i + 1), text, Provenance::PseudoGold))
            .collect();
        let distractors = dist_texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| Document::new(format!("{}-dist-{}", query.id, i + 1), text, Provenance::Distractor))
            .collect();
        CompetitiveContext::new(pseudo_gold, distractors)
    }

    /// Generate one (strategy, candidate document) pair.
    ///
    /// A strategy name repeating one already used for this query triggers a
    /// single exploration re-prompt; a second repeat is accepted with a
    /// warning flag.
    pub fn gen_blocking_candidate(
        &self,
        role: &ModelRole,
        req: &CandidateRequest<'_>,
        ctx: &CallCtx,
    ) -> Result<CandidateOutput> {
        let (min_words, max_words) = self.config.candidate_word_bounds;
        let mut bindings = BTreeMap::new();
        bindings.insert("query".to_string(), req.query.text.clone());
        bindings.insert("query_id".to_string(), req.query.id.clone());
        bindings.insert("competitive_context".to_string(), req.context_text.clone());
        bindings.insert("inspiration".to_string(), req.inspiration_text.clone());
        bindings.insert("history".to_string(), req.history_text.clone());
        bindings.insert("preference".to_string(), req.preference.as_str().to_string());
        bindings.insert("min_words".to_string(), min_words.to_string());
        bindings.insert("max_words".to_string(), max_words.to_string());

        let parse = |text: &str| -> std::result::Result<(Strategy, String), String> {
            let value = extract::extract_json_object(text).ok_or("no JSON object found")?;
            let name =
                extract::string_field(&value, "strategy_name").ok_or("missing field 'strategy_name'")?;
            let description = extract::string_field(&value, "strategy_description")
                .ok_or("missing field 'strategy_description'")?;
            let document =
                extract::string_field(&value, "document").ok_or("missing field 'document'")?;
            let words = document.split_whitespace().count();
            if words < min_words || words > max_words {
                return Err(format!(
                    "document length {words} words outside bounds [{min_words}, {max_words}]"
                ));
            }
            let strategy = Strategy::new(name, description).map_err(|e| e.to_string())?;
            Ok((strategy, document))
        };

        let (mut strategy, mut doc_text) = self.chat_parsed(
            role,
            "blocking_candidate",
            &bindings,
            ctx,
            2,
            "Reply with only a fenced JSON block with fields strategy_name, strategy_description, document, and keep the document inside the word bounds.",
            parse,
        )?;

        let mut name_repeat_accepted = false;
        if req.used_names.contains(&strategy.normalized_name()) {
            let note = format!(
                "You already attempted the strategy '{}' for this query. Propose a different strategy.",
                strategy.name
            );
            // One exploration re-prompt; any failure keeps the original pair.
            let retry = self
                .chat_inner(role, "blocking_candidate", &bindings, ctx, Some(&note), Vec::new())
                .map(|exchange| parse(&exchange.response_text));
            match retry {
                Ok(Ok((s2, d2))) => {
                    if req.used_names.contains(&s2.normalized_name()) {
                        name_repeat_accepted = true;
                    }
                    strategy = s2;
                    doc_text = d2;
                }
                Ok(Err(_)) | Err(_) => {
                    name_repeat_accepted = true;
                }
            }
        }

        Ok(CandidateOutput {
            strategy,
            document: Document::new(req.doc_id.clone(), doc_text, Provenance::Blocking),
            name_repeat_accepted,
        })
    }

    /// Run the RAG prompt against a generator role. Documents are rendered
    /// in the given order with stable numbering.
    pub fn rag_answer(
        &self,
        role: &ModelRole,
        query: &Query,
        context_docs: &[&Document],
        template_id: &str,
        ctx: &CallCtx,
    ) -> Result<String> {
        if context_docs.is_empty() {
            return Err(Error::validation("rag_answer requires a non-empty context"));
        }
        if !RAG_TEMPLATES.contains(&template_id) {
            return Err(Error::Template(format!(
                "'{template_id}' is not a RAG template (expected one of {RAG_TEMPLATES:?})"
            )));
        }
        let mut bindings = BTreeMap::new();
        bindings.insert("query".to_string(), query.text.clone());
        bindings.insert("query_id".to_string(), query.id.clone());
        bindings.insert("documents".to_string(), render_documents(context_docs));
        let exchange = self.chat(role, template_id, &bindings, ctx)?;
        Ok(exchange.response_text)
    }

    /// Judge whether a response refuses the query. Ambiguous output gets one
    /// repair re-prompt, then defaults to non-refusal with an audit flag.
    pub fn judge_refusal(
        &self,
        role: &ModelRole,
        query: &Query,
        response: &str,
        ctx: &CallCtx,
    ) -> Result<JudgeVerdict> {
        if response.trim().is_empty() {
            return Err(Error::validation("cannot judge an empty response"));
        }
        let mut bindings = BTreeMap::new();
        bindings.insert("query".to_string(), query.text.clone());
        bindings.insert("query_id".to_string(), query.id.clone());
        bindings.insert("response".to_string(), response.to_string());

        let parsed: Result<(bool, String)> = self.chat_parsed(
            role,
            "judge_refusal",
            &bindings,
            ctx,
            1,
            "Reply with exactly one word: YES or NO.",
            |text| match parse_verdict(text) {
                Some(v) => Ok((v, text.to_string())),
                None => Err("no YES/NO verdict found".into()),
            },
        );
        match parsed {
            Ok((refusal, rationale)) => Ok(JudgeVerdict {
                refusal,
                rationale,
                defaulted: false,
            }),
            Err(Error::Extraction { raw, .. }) => Ok(JudgeVerdict {
                refusal: false,
                rationale: raw,
                defaulted: true,
            }),
            Err(other) => Err(other),
        }
    }

    /// Rewrite a query, keeping its id lineage.
    pub fn paraphrase(&self, role: &ModelRole, query: &Query, ctx: &CallCtx) -> Result<Query> {
        let mut bindings = BTreeMap::new();
        bindings.insert("query".to_string(), query.text.clone());
        bindings.insert("query_id".to_string(), query.id.clone());
        let rewritten = self.chat_parsed(
            role,
            "paraphrase",
            &bindings,
            ctx,
            1,
            "Reply with only a fenced JSON block with the single field 'paraphrase'.",
            |text| {
                let from_json = extract::extract_json_object(text)
                    .and_then(|v| extract::string_field(&v, "paraphrase"));
                let rewrite = match from_json {
                    Some(p) => p,
                    None => text.trim().to_string(),
                };
                if rewrite.is_empty() {
                    return Err("empty rewrite".into());
                }
                Ok(rewrite)
            },
        )?;
        Ok(Query {
            id: query.id.clone(),
            text: rewritten,
            meta: query.meta.clone(),
        })
    }
}

/// Render documents as numbered passages, order-preserving.
pub fn render_documents(docs: &[&Document]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| format!("[{}] {}", i + 1, d.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn parse_verdict(text: &str) -> Option<bool> {
    let trimmed = text.trim().to_uppercase();
    if trimmed.starts_with("YES") {
        Some(true)
    } else if trimmed.starts_with("NO") {
        Some(false)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scripted::{ScriptRule, ScriptedBackend};

    fn gateway_with(rules: Vec<ScriptRule>) -> (Gateway, ModelRole) {
        let mut gw = Gateway::new(
            TemplateStore::builtin(),
            GatewayConfig {
                deterministic_time: true,
                ..GatewayConfig::default()
            },
        );
        gw.add_backend("script", Arc::new(ScriptedBackend::new("script", rules)), 0);
        let role = ModelRole::new(RoleKind::Attacker, "script");
        (gw, role)
    }

    fn bindings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn scripted_chat_returns_canned_reply_and_usage() {
        let (gw, role) = gateway_with(vec![ScriptRule::new("judge_refusal", "YES").usage(11, 2)]);
        let ex = gw
            .chat(
                &role,
                "judge_refusal",
                &bindings(&[("query", "q"), ("response", "r")]),
                &CallCtx::default(),
            )
            .unwrap();
        assert_eq!(ex.response_text, "YES");
        assert_eq!((ex.tokens_in, ex.tokens_out), (11, 2));
        assert_eq!(gw.transcript().len(), 1);
    }

    #[test]
    fn missing_placeholder_is_template_error() {
        let (gw, role) = gateway_with(vec![ScriptRule::new("judge_refusal", "YES")]);
        let err = gw
            .chat(&role, "judge_refusal", &bindings(&[("query", "q")]), &CallCtx::default())
            .unwrap_err();
        assert!(err.to_string().contains("response"));
        // render failures never reach the backend
        assert_eq!(gw.transcript().len(), 0);
    }

    #[test]
    fn transient_failures_retry_with_all_attempts_logged() {
        let (gw, role) =
            gateway_with(vec![ScriptRule::new("judge_refusal", "YES").failing_first(2)]);
        let ex = gw
            .chat(
                &role,
                "judge_refusal",
                &bindings(&[("query", "q"), ("response", "r")]),
                &CallCtx::default(),
            )
            .unwrap();
        assert_eq!(ex.attempts.len(), 3);
        assert_eq!(ex.attempts[0].outcome, "transient_error");
        assert_eq!(ex.attempts[1].outcome, "transient_error");
        assert_eq!(ex.attempts[2].outcome, "ok");
    }

    #[test]
    fn exhausted_retries_is_transport_error() {
        let (gw, role) =
            gateway_with(vec![ScriptRule::new("judge_refusal", "YES").failing_first(10)]);
        let err = gw
            .chat(
                &role,
                "judge_refusal",
                &bindings(&[("query", "q"), ("response", "r")]),
                &CallCtx::default(),
            )
            .unwrap_err();
        match err {
            Error::Transport { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other}"),
        }
    }

    #[test]
    fn profile_extraction_with_surrounding_prose() {
        let (gw, role) = gateway_with(vec![ScriptRule::new(
            "query_profile",
            "Sure thing!\n```json\n{\"topic\": \"T\", \"intent\": \"I\", \"keywords\": [\"a\", \"b\"]}\n```",
        )]);
        let profile = gw
            .gen_query_profile(&role, &Query::new("q1", "what is T?"), &CallCtx::default())
            .unwrap();
        assert_eq!(profile.topic, "T");
        assert_eq!(profile.keywords, vec!["a", "b"]);
    }

    #[test]
    fn profile_garbage_three_times_is_extraction_error() {
        let (gw, role) = gateway_with(vec![ScriptRule::new("query_profile", "no structure")]);
        let err = gw
            .gen_query_profile(&role, &Query::new("q1", "text"), &CallCtx::default())
            .unwrap_err();
        match err {
            Error::Extraction { raw, .. } => assert_eq!(raw, "no structure"),
            other => panic!("expected extraction error, got {other}"),
        }
        // initial call + 2 repairs
        assert_eq!(gw.transcript().len(), 3);
    }

    #[test]
    fn profile_repair_succeeds_on_second_attempt() {
        let (gw, role) = gateway_with(vec![ScriptRule::sequence(
            "query_profile",
            vec![
                "garbage".into(),
                "{\"topic\": \"T\", \"intent\": \"I\", \"keywords\": [\"k\"]}".into(),
            ],
        )]);
        let profile = gw
            .gen_query_profile(&role, &Query::new("q1", "text"), &CallCtx::default())
            .unwrap();
        assert_eq!(profile.topic, "T");
        assert_eq!(gw.transcript().len(), 2);
    }

    #[test]
    fn competitive_context_counts_enforced() {
        let good = r#"{"pseudo_gold": ["g1", "g2"], "distractors": ["d1", "d2"]}"#;
        let (gw, role) = gateway_with(vec![ScriptRule::new("competitive_context", good)]);
        let ctx = gw
            .gen_competitive_context(&role, &Query::new("q1", "text"), 2, &CallCtx::default())
            .unwrap();
        assert_eq!(ctx.m(), 2);
        assert_eq!(ctx.all_docs().count(), 4);
        assert_eq!(ctx.pseudo_gold[0].provenance, Provenance::PseudoGold);
        assert_eq!(ctx.distractors[1].provenance, Provenance::Distractor);
        assert_eq!(ctx.pseudo_gold[0].id, "q1-gold-1");
    }

    #[test]
    fn competitive_context_shortfall_errors_after_one_repair() {
        let bad = r#"{"pseudo_gold": ["g1"], "distractors": ["d1", "d2"]}"#;
        let (gw, role) = gateway_with(vec![ScriptRule::new("competitive_context", bad)]);
        let err = gw
            .gen_competitive_context(&role, &Query::new("q1", "text"), 2, &CallCtx::default())
            .unwrap_err();
        assert!(matches!(err, Error::Extraction { .. }));
        assert_eq!(gw.transcript().len(), 2); // initial + 1 repair
    }

    fn candidate_json(name: &str, words: usize) -> String {
        let doc = vec!["word"; words].join(" ");
        format!(
            r#"{{"strategy_name": "{name}", "strategy_description": "desc", "document": "{doc}"}}"#
        )
    }

    #[test]
    fn candidate_parsing_and_provenance() {
        let (gw, role) = gateway_with(vec![ScriptRule::new(
            "blocking_candidate",
            candidate_json("S1", 100),
        )]);
        let query = Query::new("q1", "text");
        let used = BTreeSet::new();
        let out = gw
            .gen_blocking_candidate(
                &role,
                &CandidateRequest {
                    query: &query,
                    doc_id: "q1-cand-1".into(),
                    context_text: "(ctx)".into(),
                    inspiration_text: "(none)".into(),
                    history_text: "(empty)".into(),
                    used_names: &used,
                    preference: Preference::PhysicalHarm,
                },
                &CallCtx::default(),
            )
            .unwrap();
        assert_eq!(out.strategy.name, "S1");
        assert_eq!(out.document.provenance, Provenance::Blocking);
        assert_eq!(out.document.id, "q1-cand-1");
        assert!(!out.name_repeat_accepted);
    }

    #[test]
    fn candidate_too_short_is_extraction_error() {
        let (gw, role) = gateway_with(vec![ScriptRule::new(
            "blocking_candidate",
            candidate_json("S1", 10),
        )]);
        let query = Query::new("q1", "text");
        let used = BTreeSet::new();
        let err = gw
            .gen_blocking_candidate(
                &role,
                &CandidateRequest {
                    query: &query,
                    doc_id: "d".into(),
                    context_text: String::new(),
                    inspiration_text: String::new(),
                    history_text: String::new(),
                    used_names: &used,
                    preference: Preference::SocialBias,
                },
                &CallCtx::default(),
            )
            .unwrap_err();
        assert!(err.to_string().contains("bounds"));
    }

    #[test]
    fn candidate_name_repeat_triggers_exploration_reprompt() {
        let (gw, role) = gateway_with(vec![ScriptRule::sequence(
            "blocking_candidate",
            vec![candidate_json("S1", 90), candidate_json("S2", 90)],
        )]);
        let query = Query::new("q1", "text");
        let mut used = BTreeSet::new();
        used.insert("s1".to_string());
        let out = gw
            .gen_blocking_candidate(
                &role,
                &CandidateRequest {
                    query: &query,
                    doc_id: "d".into(),
                    context_text: String::new(),
                    inspiration_text: String::new(),
                    history_text: String::new(),
                    used_names: &used,
                    preference: Preference::ComplianceRisk,
                },
                &CallCtx::default(),
            )
            .unwrap();
        assert_eq!(out.strategy.name, "S2");
        assert!(!out.name_repeat_accepted);
    }

    #[test]
    fn candidate_persistent_repeat_accepted_with_warning() {
        let (gw, role) = gateway_with(vec![ScriptRule::new(
            "blocking_candidate",
            candidate_json("S1", 90),
        )]);
        let query = Query::new("q1", "text");
        let mut used = BTreeSet::new();
        used.insert("s1".to_string());
        let out = gw
            .gen_blocking_candidate(
                &role,
                &CandidateRequest {
                    query: &query,
                    doc_id: "d".into(),
                    context_text: String::new(),
                    inspiration_text: String::new(),
                    history_text: String::new(),
                    used_names: &used,
                    preference: Preference::PhysicalHarm,
                },
                &CallCtx::default(),
            )
            .unwrap();
        assert_eq!(out.strategy.name, "S1");
        assert!(out.name_repeat_accepted);
    }

    #[test]
    fn rag_answer_renders_documents_in_order() {
        let (gw, role) = gateway_with(vec![ScriptRule::new("default", "answer")]);
        let d1 = Document::new("a", "first text", Provenance::Clean);
        let d2 = Document::new("b", "second text", Provenance::Clean);
        let query = Query::new("q1", "question?");
        gw.rag_answer(&role, &query, &[&d1, &d2], "default", &CallCtx::default())
            .unwrap();
        let transcript = gw.transcript().snapshot();
        let prompt = &transcript[0].rendered_prompt;
        assert!(prompt.contains("[1] first text"));
        assert!(prompt.contains("[2] second text"));
        assert!(prompt.find("[1] first").unwrap() < prompt.find("[2] second").unwrap());
    }

    #[test]
    fn rag_answer_empty_context_is_validation_error() {
        let (gw, role) = gateway_with(vec![]);
        let query = Query::new("q1", "question?");
        assert!(matches!(
            gw.rag_answer(&role, &query, &[], "default", &CallCtx::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn rag_answer_deterministic_under_script() {
        let rules = vec![ScriptRule::new("default", "same answer")];
        let (gw, role) = gateway_with(rules);
        let d = Document::new("a", "text", Provenance::Clean);
        let query = Query::new("q1", "question?");
        let a1 = gw
            .rag_answer(&role, &query, &[&d], "default", &CallCtx::default())
            .unwrap();
        let a2 = gw
            .rag_answer(&role, &query, &[&d], "default", &CallCtx::default())
            .unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn judge_affirmative_and_negative_tokens() {
        let (gw, role) = gateway_with(vec![
            ScriptRule::new("judge_refusal", "YES").when("response", "refuse"),
            ScriptRule::new("judge_refusal", "NO"),
        ]);
        let query = Query::new("q1", "question?");
        let v1 = gw
            .judge_refusal(&role, &query, "I refuse to answer", &CallCtx::default())
            .unwrap();
        assert!(v1.refusal && !v1.defaulted);
        let v2 = gw
            .judge_refusal(&role, &query, "The answer is 42", &CallCtx::default())
            .unwrap();
        assert!(!v2.refusal && !v2.defaulted);
    }

    #[test]
    fn judge_ambiguity_fails_closed() {
        let (gw, role) = gateway_with(vec![ScriptRule::new("judge_refusal", "hard to say really")]);
        let query = Query::new("q1", "question?");
        let v = gw
            .judge_refusal(&role, &query, "some response", &CallCtx::default())
            .unwrap();
        assert!(!v.refusal);
        assert!(v.defaulted);
        assert_eq!(gw.transcript().len(), 2); // initial + 1 repair
    }

    #[test]
    fn paraphrase_identity_script() {
        let (gw, role) = gateway_with(vec![ScriptRule::new(
            "paraphrase",
            r#"{"paraphrase": "{{query}}"}"#,
        )]);
        let query = Query::new("q1", "original text");
        let out = gw.paraphrase(&role, &query, &CallCtx::default()).unwrap();
        assert_eq!(out.text, "original text");
        assert_eq!(out.id, "q1");
    }

    #[test]
    fn paraphrase_empty_rewrite_is_extraction_error() {
        let (gw, role) = gateway_with(vec![ScriptRule::new(
            "paraphrase",
            r#"{"paraphrase": ""}"#,
        )]);
        let query = Query::new("q1", "original");
        assert!(matches!(
            gw.paraphrase(&role, &query, &CallCtx::default()),
            Err(Error::Extraction { .. })
        ));
    }

    #[test]
    fn transcript_usage_sums_are_exact() {
        let (gw, role) = gateway_with(vec![
        ScriptRule::new("judge_refusal", "YES").usage(10, 1),
        ]);
        for _ in 0..3 {
            gw.chat(
                &role,
                "judge_refusal",
                &bindings(&[("query", "q"), ("response", "r")]),
                &CallCtx::for_query("q1"),
            )
            .unwrap();
        }
        let totals = gw.transcript().totals();
        assert_eq!(totals.calls, 3);
        assert_eq!(totals.tokens_in, 30);
        assert_eq!(totals.tokens_out, 3);
    }
}
