//! Deterministic scripted backend for offline pipelines and tests.
//!
//! A script is a line-delimited JSON file of rules. Each call is matched
//! against the rules in file order; the first rule whose `template_id`
//! matches and whose `when` patterns are all substrings of the
//! corresponding binding values wins.
//!
//! Rule fields:
//! - `template_id`: template this rule answers.
//! - `when`: optional map of binding name -> substring pattern.
//! - `response` or `responses`: reply text. A list is consumed one entry
//!   per matching call, sticking at the last entry.
//! - `tokens_in` / `tokens_out`: declared usage; defaults estimate
//!   len/4 from the rendered prompt and reply.
//! - `transient_failures`: the rule's first N matching calls fail with a
//!   retryable transport error.
//!
//! Reply text may itself contain `{{binding}}` placeholders, substituted
//! from the call bindings — useful for identity paraphrasers and echo rules.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::backend::{BackendFailure, ChatBackend, ChatCall, ChatReply};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    pub template_id: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub when: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_in: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_out: Option<u64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub transient_failures: u32,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

impl ScriptRule {
    pub fn new(template_id: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptRule {
            template_id: template_id.into(),
            when: BTreeMap::new(),
            response: Some(response.into()),
            responses: Vec::new(),
            tokens_in: None,
            tokens_out: None,
            transient_failures: 0,
        }
    }

    pub fn when(mut self, binding: impl Into<String>, pattern: impl Into<String>) -> Self {
        self.when.insert(binding.into(), pattern.into());
        self
    }

    pub fn sequence(template_id: impl Into<String>, responses: Vec<String>) -> Self {
        ScriptRule {
            template_id: template_id.into(),
            when: BTreeMap::new(),
            response: None,
            responses,
            tokens_in: None,
            tokens_out: None,
            transient_failures: 0,
        }
    }

    pub fn usage(mut self, tokens_in: u64, tokens_out: u64) -> Self {
        self.tokens_in = Some(tokens_in);
        self.tokens_out = Some(tokens_out);
        self
    }

    pub fn failing_first(mut self, n: u32) -> Self {
        self.transient_failures = n;
        self
    }

    fn matches(&self, call: &ChatCall<'_>) -> bool {
        if self.template_id != call.template_id {
            return false;
        }
        self.when.iter().all(|(binding, pattern)| {
            call.bindings
                .get(binding)
                .is_some_and(|value| value.contains(pattern))
        })
    }
}

#[derive(Default)]
struct RuleState {
    failures_served: u32,
    responses_served: usize,
}

pub struct ScriptedBackend {
    id: String,
    rules: Vec<ScriptRule>,
    state: Mutex<Vec<RuleState>>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, rules: Vec<ScriptRule>) -> Self {
        let state = rules.iter().map(|_| RuleState::default()).collect();
        ScriptedBackend {
            id: id.into(),
            rules,
            state: Mutex::new(state),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| Error::config(format!("cannot open script {}: {e}", path.display())))?;
        let mut rules = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let rule: ScriptRule = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path.display().to_string(), idx + 1, e.to_string()))?;
            rules.push(rule);
        }
        Ok(Self::new(format!("scripted:{}", path.display()), rules))
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    /// Template ids this script can answer. Used by manifest validation.
    pub fn covered_templates(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.rules.iter().map(|r| r.template_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn substitute_bindings(text: &str, bindings: &BTreeMap<String, String>) -> String {
    if !text.contains("{{") {
        return text.to_string();
    }
    let mut out = text.to_string();
    for (name, value) in bindings {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn invoke(&self, call: &ChatCall<'_>) -> Result<ChatReply, BackendFailure> {
        for (idx, rule) in self.rules.iter().enumerate() {
            if !rule.matches(call) {
                continue;
            }
            let mut state = self.state.lock().unwrap();
            let entry = &mut state[idx];
            if entry.failures_served < rule.transient_failures {
                entry.failures_served += 1;
                return Err(BackendFailure::Transient(format!(
                    "scripted transient failure {}/{}",
                    entry.failures_served, rule.transient_failures
                )));
            }
            let raw = if let Some(single) = &rule.response {
                single.clone()
            } else if !rule.responses.is_empty() {
                let i = entry.responses_served.min(rule.responses.len() - 1);
                entry.responses_served += 1;
                rule.responses[i].clone()
            } else {
                return Err(BackendFailure::Permanent(format!(
                    "script rule {} for template '{}' has no response",
                    idx + 1,
                    rule.template_id
                )));
            };
            let text = substitute_bindings(&raw, call.bindings);
            return Ok(ChatReply {
                tokens_in: rule.tokens_in.unwrap_or_else(|| estimate_tokens(call.rendered_prompt)),
                tokens_out: rule.tokens_out.unwrap_or_else(|| estimate_tokens(&text)),
                text,
            });
        }
        Err(BackendFailure::Permanent(format!(
            "no scripted rule matched template '{}'",
            call.template_id
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call<'a>(
        template_id: &'a str,
        bindings: &'a BTreeMap<String, String>,
        rendered: &'a str,
    ) -> ChatCall<'a> {
        ChatCall {
            template_id,
            bindings,
            rendered_prompt: rendered,
            temperature: 0.1,
        }
    }

    #[test]
    fn first_matching_rule_wins() {
        let backend = ScriptedBackend::new(
            "s",
            vec![
                ScriptRule::new("t", "specific").when("query", "alpha"),
                ScriptRule::new("t", "fallback"),
            ],
        );
        let mut bindings = BTreeMap::new();
        bindings.insert("query".to_string(), "alpha beta".to_string());
        let reply = backend.invoke(&call("t", &bindings, "p")).unwrap();
        assert_eq!(reply.text, "specific");

        bindings.insert("query".to_string(), "gamma".to_string());
        let reply = backend.invoke(&call("t", &bindings, "p")).unwrap();
        assert_eq!(reply.text, "fallback");
    }

    #[test]
    fn declared_usage_wins_over_estimate() {
        let backend = ScriptedBackend::new("s", vec![ScriptRule::new("t", "R").usage(7, 3)]);
        let bindings = BTreeMap::new();
        let reply = backend.invoke(&call("t", &bindings, "prompt")).unwrap();
        assert_eq!((reply.tokens_in, reply.tokens_out), (7, 3));
    }

    #[test]
    fn sequences_consume_then_stick() {
        let backend = ScriptedBackend::new(
            "s",
            vec![ScriptRule::sequence("t", vec!["a".into(), "b".into()])],
        );
        let bindings = BTreeMap::new();
        let texts: Vec<String> = (0..3)
            .map(|_| backend.invoke(&call("t", &bindings, "p")).unwrap().text)
            .collect();
        assert_eq!(texts, ["a", "b", "b"]);
    }

    #[test]
    fn transient_failures_then_success() {
        let backend =
            ScriptedBackend::new("s", vec![ScriptRule::new("t", "ok").failing_first(2)]);
        let bindings = BTreeMap::new();
        assert!(matches!(
            backend.invoke(&call("t", &bindings, "p")),
            Err(BackendFailure::Transient(_))
        ));
        assert!(matches!(
            backend.invoke(&call("t", &bindings, "p")),
            Err(BackendFailure::Transient(_))
        ));
        assert_eq!(backend.invoke(&call("t", &bindings, "p")).unwrap().text, "ok");
    }

    #[test]
    fn unmatched_template_is_permanent_error() {
        let backend = ScriptedBackend::new("s", vec![]);
        let bindings = BTreeMap::new();
        assert!(matches!(
            backend.invoke(&call("t", &bindings, "p")),
            Err(BackendFailure::Permanent(_))
        ));
    }

    #[test]
    fn response_substitutes_call_bindings() {
        let backend = ScriptedBackend::new(
            "s",
            vec![ScriptRule::new("paraphrase", r#"{"paraphrase": "{{query}}"}"#)],
        );
        let mut bindings = BTreeMap::new();
        bindings.insert("query".to_string(), "original words".to_string());
        let reply = backend.invoke(&call("paraphrase", &bindings, "p")).unwrap();
        assert_eq!(reply.text, r#"{"paraphrase": "original words"}"#);
    }

    #[test]
    fn file_round_trip() {
        let mut tmp = tempfile::NamedTempFile::new().unwrap();
        use std::io::Write as _;
        writeln!(
            tmp,
            r#"{{"template_id": "t", "when": {{"query": "x"}}, "response": "hit", "tokens_in": 5, "tokens_out": 2}}"#
        )
        .unwrap();
        let backend = ScriptedBackend::from_file(tmp.path()).unwrap();
        assert_eq!(backend.rules().len(), 1);
        assert_eq!(backend.covered_templates(), ["t"]);
    }
}
