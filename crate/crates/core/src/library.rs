//! The query-aware strategy library.
//!
//! A key-value store of refusal-induction tactics verified against the
//! surrogate: keys are embeddings of structured query profiles, values are
//! named strategies. Retrieval returns the top-n most similar strategies as
//! inspiration for new queries; entries are only ever added (on verified
//! success) or loaded, never evicted.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{cosine, EmbeddingVector};

/// High-level risk perspective guiding candidate generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    PhysicalHarm,
    SocialBias,
    ComplianceRisk,
}

impl Preference {
    pub const ALL: [Preference; 3] = [
        Preference::PhysicalHarm,
        Preference::SocialBias,
        Preference::ComplianceRisk,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Preference::PhysicalHarm => "physical_harm",
            Preference::SocialBias => "social_bias",
            Preference::ComplianceRisk => "compliance_risk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "physical_harm" => Ok(Preference::PhysicalHarm),
            "social_bias" => Ok(Preference::SocialBias),
            "compliance_risk" => Ok(Preference::ComplianceRisk),
            other => Err(Error::validation(format!("unknown preference '{other}'"))),
        }
    }
}

/// Structured abstraction of a query: the library key material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryProfile {
    pub topic: String,
    pub intent: String,
    pub keywords: Vec<String>,
}

impl QueryProfile {
    /// Validates invariants: topic/intent non-empty, keywords non-empty and
    /// deduplicated preserving first occurrence.
    pub fn new(topic: impl Into<String>, intent: impl Into<String>, keywords: Vec<String>) -> Result<Self> {
        let topic = topic.into();
        let intent = intent.into();
        if topic.trim().is_empty() {
            return Err(Error::validation("profile topic must be non-empty"));
        }
        if intent.trim().is_empty() {
            return Err(Error::validation("profile intent must be non-empty"));
        }
        let mut seen = BTreeSet::new();
        let keywords: Vec<String> = keywords
            .into_iter()
            .map(|k| k.trim().to_string())
            .filter(|k| !k.is_empty() && seen.insert(k.clone()))
            .collect();
        if keywords.is_empty() {
            return Err(Error::validation("profile keywords must be non-empty"));
        }
        Ok(QueryProfile { topic, intent, keywords })
    }

    /// Canonical single-line rendering used as embedding input. Format is
    /// fixed and versioned; keyword order reflects the input order.
    pub fn to_text(&self) -> String {
        format!(
            "Topic: {}; Intent: {}; Keywords: {}",
            self.topic,
            self.intent,
            self.keywords.join(", ")
        )
    }
}

/// A named refusal-induction tactic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: String,
    pub description: String,
}

impl Strategy {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let description = description.into();
        if normalize_name(&name).is_empty() {
            return Err(Error::validation("strategy name must be non-empty"));
        }
        if description.trim().is_empty() {
            return Err(Error::validation("strategy description must be non-empty"));
        }
        Ok(Strategy { name, description })
    }

    pub fn normalized_name(&self) -> String {
        normalize_name(&self.name)
    }
}

/// Case-folded, whitespace-collapsed form used for comparisons.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// One stored (profile-embedding, strategy) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub key: EmbeddingVector,
    pub strategy: Strategy,
    pub origin_query_id: String,
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preference: Option<Preference>,
    /// Profile rendering the key was embedded from; enables re-embedding
    /// when importing across embedders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_text: Option<String>,
}

/// Result of an insert.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    /// An equivalent entry already existed; the insert was a no-op.
    Deduplicated { existing_origin: String },
}

/// On-disk record: one per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LibraryRecord {
    pub name: String,
    pub description: String,
    pub key: Vec<f64>,
    pub origin_query_id: String,
    pub created_at: u64,
    pub embedder_id: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preference: Option<Preference>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_text: Option<String>,
}

/// Cosine threshold above which same-named entries are considered duplicates.
pub const DEDUPE_COSINE: f64 = 0.95;

#[derive(Debug)]
pub struct StrategyLibrary {
    embedder_id: String,
    dim: usize,
    entries: Vec<LibraryEntry>,
    audit: Vec<String>,
}

impl StrategyLibrary {
    pub fn new(embedder_id: impl Into<String>, dim: usize) -> Self {
        StrategyLibrary {
            embedder_id: embedder_id.into(),
            dim,
            entries: Vec::new(),
            audit: Vec::new(),
        }
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn audit_log(&self) -> &[String] {
        &self.audit
    }

    fn check_key(&self, key: &EmbeddingVector) -> Result<()> {
        if key.dim() != self.dim {
            return Err(Error::validation(format!(
                "key dimension {} does not match library dimension {}",
                key.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Entries ranked by similarity to `query_key`: similarity descending,
    /// ties by ascending created_at then origin_query_id, deduplicated by
    /// normalized strategy name keeping the highest-ranked instance, then
    /// truncated to n.
    pub fn retrieve_topn_entries(&self, query_key: &EmbeddingVector, n: usize) -> Result<Vec<&LibraryEntry>> {
        if n == 0 {
            return Err(Error::validation("n must be >= 1"));
        }
        self.check_key(query_key)?;
        let mut scored: Vec<(f64, &LibraryEntry)> = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            scored.push((cosine(query_key, &entry.key)?, entry));
        }
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("similarities are finite")
                .then_with(|| a.1.created_at.cmp(&b.1.created_at))
                .then_with(|| a.1.origin_query_id.cmp(&b.1.origin_query_id))
        });
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (_, entry) in scored {
            if seen.insert(entry.strategy.normalized_name()) {
                out.push(entry);
                if out.len() == n {
                    break;
                }
            }
        }
        Ok(out)
    }

    /// Top-n most similar strategies; empty on an empty library (cold start).
    pub fn retrieve_topn(&self, query_key: &EmbeddingVector, n: usize) -> Result<Vec<Strategy>> {
        Ok(self
            .retrieve_topn_entries(query_key, n)?
            .into_iter()
            .map(|e| e.strategy.clone())
            .collect())
    }

    /// Insert a verified strategy. A no-op (recorded in the audit log) when
    /// an entry with the same normalized name and near-identical key exists.
    pub fn insert(
        &mut self,
        key: EmbeddingVector,
        strategy: Strategy,
        origin_query_id: impl Into<String>,
        created_at: u64,
        preference: Option<Preference>,
        profile_text: Option<String>,
    ) -> Result<InsertOutcome> {
        self.check_key(&key)?;
        let origin_query_id = origin_query_id.into();
        let normalized = strategy.normalized_name();
        for existing in &self.entries {
            if existing.strategy.normalized_name() == normalized
                && cosine(&key, &existing.key)? >= DEDUPE_COSINE
            {
                let outcome = InsertOutcome::Deduplicated {
                    existing_origin: existing.origin_query_id.clone(),
                };
                self.audit.push(format!(
                    "dedup: strategy '{}' from query {} matches existing entry from query {}",
                    strategy.name, origin_query_id, existing.origin_query_id
                ));
                return Ok(outcome);
            }
        }
        self.entries.push(LibraryEntry {
            key,
            strategy,
            origin_query_id,
            created_at,
            preference,
            profile_text,
        });
        Ok(InsertOutcome::Inserted)
    }

    /// Persist as line-delimited records.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for entry in &self.entries {
            let record = LibraryRecord {
                name: entry.strategy.name.clone(),
                description: entry.strategy.description.clone(),
                key: entry.key.values().to_vec(),
                origin_query_id: entry.origin_query_id.clone(),
                created_at: entry.created_at,
                embedder_id: self.embedder_id.clone(),
                dim: self.dim,
                preference: entry.preference,
                profile_text: entry.profile_text.clone(),
            };
            out.push_str(&serde_json::to_string(&record).unwrap());
            out.push('\n');
        }
        let mut file = File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Read raw records without binding them to an embedder.
    pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<LibraryRecord>> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: LibraryRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path.display().to_string(), idx + 1, e.to_string()))?;
            records.push(record);
        }
        Ok(records)
    }

    /// Load a library persisted by [`save`](Self::save), verifying every
    /// record against the expected embedder binding. An empty file loads as
    /// an empty library.
    pub fn load(path: impl AsRef<Path>, embedder_id: &str, dim: usize) -> Result<Self> {
        let path = path.as_ref();
        let mut library = StrategyLibrary::new(embedder_id, dim);
        for (idx, record) in Self::read_records(path)?.into_iter().enumerate() {
            if record.embedder_id != embedder_id {
                return Err(Error::validation(format!(
                    "record {} of {}: embedder '{}' does not match expected '{}' (re-embed to import)",
                    idx + 1,
                    path.display(),
                    record.embedder_id,
                    embedder_id
                )));
            }
            if record.dim != dim || record.key.len() != dim {
                return Err(Error::validation(format!(
                    "record {} of {}: dimension mismatch (record {}, expected {})",
                    idx + 1,
                    path.display(),
                    record.dim,
                    dim
                )));
            }
            library.entries.push(LibraryEntry {
                key: EmbeddingVector::new(record.key)?,
                strategy: Strategy::new(record.name, record.description)?,
                origin_query_id: record.origin_query_id,
                created_at: record.created_at,
                preference: record.preference,
                profile_text: record.profile_text,
            });
        }
        Ok(library)
    }
}

impl PartialEq for StrategyLibrary {
    fn eq(&self, other: &Self) -> bool {
        self.embedder_id == other.embedder_id && self.dim == other.dim && self.entries == other.entries
    }
}
