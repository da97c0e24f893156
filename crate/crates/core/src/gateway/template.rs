//! Prompt templates with named placeholders.
//!
//! Bodies are external text files (built-in copies ship with the crate) and
//! are versioned by content hash; the hash of every template used in a call
//! lands in the transcript. Placeholders use `{{name}}` syntax and every
//! placeholder appearing in the body is required at render time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
    pub hash: String,
    required: BTreeSet<String>,
}

fn scan_placeholders(body: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i + 1 < bytes.len() {
        if bytes[i] == b'{' && bytes[i + 1] == b'{' {
            if let Some(end) = body[i + 2..].find("}}") {
                let name = &body[i + 2..i + 2 + end];
                if !name.is_empty() && name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                    out.insert(name.to_string());
                }
                i += 2 + end + 2;
                continue;
            }
        }
        i += 1;
    }
    out
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let hash = hex::encode(Sha256::digest(body.as_bytes()));
        let required = scan_placeholders(&body);
        PromptTemplate {
            id: id.into(),
            body,
            hash,
            required,
        }
    }

    pub fn required_placeholders(&self) -> &BTreeSet<String> {
        &self.required
    }

    /// Substitute every placeholder; unbound placeholders are errors.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String> {
        let mut rendered = self.body.clone();
        for name in &self.required {
            let value = bindings.get(name).ok_or_else(|| {
                Error::Template(format!(
                    "template '{}' requires placeholder '{name}' but no binding was provided",
                    self.id
                ))
            })?;
            rendered = rendered.replace(&format!("{{{{{name}}}}}"), value);
        }
        Ok(rendered)
    }
}

/// Identifiers of the templates the pipeline depends on.
pub const REQUIRED_TEMPLATES: &[&str] = &[
    "query_profile",
    "competitive_context",
    "blocking_candidate",
    "default",
    "general",
    "security_focused",
    "judge_refusal",
    "paraphrase",
];

/// The three RAG answer templates.
pub const RAG_TEMPLATES: &[&str] = &["default", "general", "security_focused"];

#[derive(Debug, Clone, Default)]
pub struct TemplateStore {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateStore {
    /// The built-in template set shipped with the crate.
    pub fn builtin() -> Self {
        let mut store = TemplateStore::default();
        store.put(PromptTemplate::new(
            "query_profile",
            include_str!("../../templates/query_profile.txt"),
        ));
        store.put(PromptTemplate::new(
            "competitive_context",
            include_str!("../../templates/competitive_context.txt"),
        ));
        store.put(PromptTemplate::new(
            "blocking_candidate",
            include_str!("../../templates/blocking_candidate.txt"),
        ));
        store.put(PromptTemplate::new(
            "default",
            include_str!("../../templates/default.txt"),
        ));
        store.put(PromptTemplate::new(
            "general",
            include_str!("../../templates/general.txt"),
        ));
        store.put(PromptTemplate::new(
            "security_focused",
            include_str!("../../templates/security_focused.txt"),
        ));
        store.put(PromptTemplate::new(
            "judge_refusal",
            include_str!("../../templates/judge_refusal.txt"),
        ));
        store.put(PromptTemplate::new(
            "paraphrase",
            include_str!("../../templates/paraphrase.txt"),
        ));
        store
    }

    /// Built-ins overridden by any `<id>.txt` files found in `dir`.
    pub fn with_overrides(dir: impl AsRef<Path>) -> Result<Self> {
        let mut store = Self::builtin();
        let dir = dir.as_ref();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Template(format!("bad template filename {}", path.display())))?
                .to_string();
            let body = std::fs::read_to_string(&path)?;
            store.put(PromptTemplate::new(id, body));
        }
        Ok(store)
    }

    pub fn put(&mut self, template: PromptTemplate) {
        self.templates.insert(template.id.clone(), template);
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(id)
            .ok_or_else(|| Error::Template(format!("unknown template '{id}'")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.templates.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(|s| s.as_str())
    }

    /// Content hashes of every template, for artifact provenance.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(id, t)| (id.clone(), t.hash.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn render_substitutes_all_placeholders() {
        let t = PromptTemplate::new("t", "Hello {{name}}, you asked: {{query}}");
        let out = t.render(&bind(&[("name", "world"), ("query", "why?")])).unwrap();
        assert_eq!(out, "Hello world, you asked: why?");
    }

    #[test]
    fn render_fails_naming_missing_placeholder() {
        let t = PromptTemplate::new("t", "{{a}} {{b}}");
        let err = t.render(&bind(&[("a", "x")])).unwrap_err();
        assert!(err.to_string().contains("'b'"));
    }

    #[test]
    fn hash_is_content_hash() {
        let a = PromptTemplate::new("x", "same body");
        let b = PromptTemplate::new("y", "same body");
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, PromptTemplate::new("x", "other body").hash);
    }

    #[test]
    fn builtin_store_is_complete() {
        let store = TemplateStore::builtin();
        for id in REQUIRED_TEMPLATES {
            assert!(store.contains(id), "missing builtin template {id}");
        }
        for id in RAG_TEMPLATES {
            let t = store.get(id).unwrap();
            assert!(t.required_placeholders().contains("query"));
            assert!(t.required_placeholders().contains("documents"));
        }
    }

    #[test]
    fn overrides_replace_builtins() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("judge_refusal.txt"), "verdict for {{query}} / {{response}}").unwrap();
        let store = TemplateStore::with_overrides(dir.path()).unwrap();
        assert!(store.get("judge_refusal").unwrap().body.starts_with("verdict"));
        // untouched builtins survive
        assert!(store.contains("default"));
    }
}
