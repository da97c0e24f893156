//! Queries, documents, and knowledge bases.
//!
//! A knowledge base is an ordered, immutable collection of documents.
//! Poisoning a knowledge base for a query is modeled either as a full copy
//! ([`KnowledgeBase::inject`]) or as a cheap per-query overlay
//! ([`PoisonedView`]) that leaves the base untouched.
//!
//! Query and corpus files are line-delimited JSON records with fields
//! `id`, `text`, and an optional `meta` map.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A natural-language question to be answered by the RAG system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            id: id.into(),
            text: text.into(),
            meta: None,
        }
    }
}

/// Where a document came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Loaded from the original corpus.
    Clean,
    /// Generated as simulated direct evidence.
    PseudoGold,
    /// Generated as an on-topic passage with no direct evidence.
    Distractor,
    /// The injected adversarial document.
    Blocking,
}

/// A knowledge-base text unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, provenance: Provenance) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            provenance,
            meta: None,
        }
    }
}

/// An ordered collection of documents with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub name: String,
    documents: Vec<Document>,
    index: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(name: impl Into<String>) -> Self {
        KnowledgeBase {
            name: name.into(),
            documents: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Append a document, rejecting duplicate ids and empty text.
    pub fn push(&mut self, doc: Document) -> Result<()> {
        if doc.text.trim().is_empty() {
            return Err(Error::validation(format!(
                "document '{}' has empty text",
                doc.id
            )));
        }
        if self.index.contains_key(&doc.id) {
            return Err(Error::validation(format!(
                "duplicate document id '{}' in knowledge base '{}'",
                doc.id, self.name
            )));
        }
        self.index.insert(doc.id.clone(), self.documents.len());
        self.documents.push(doc);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.index.get(id).map(|&i| &self.documents[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Return a new knowledge base containing every original document plus
    /// `doc` tagged as blocking. The receiver is left unchanged.
    ///
    /// At most one blocking document may be present at a time; injecting a
    /// second one (or a duplicate id) is rejected.
    pub fn inject(&self, doc: Document) -> Result<KnowledgeBase> {
        if self.contains(&doc.id) {
            return Err(Error::validation(format!(
                "cannot inject '{}': id already present in '{}'",
                doc.id, self.name
            )));
        }
        if self
            .documents
            .iter()
            .any(|d| d.provenance == Provenance::Blocking)
        {
            return Err(Error::validation(format!(
                "knowledge base '{}' already contains a blocking document",
                self.name
            )));
        }
        let mut out = self.clone();
        out.push(Document {
            provenance: Provenance::Blocking,
            ..doc
        })?;
        Ok(out)
    }

    /// Cheap per-query poisoned view over this base.
    pub fn poisoned<'a>(&'a self, doc: &'a Document) -> Result<PoisonedView<'a>> {
        PoisonedView::new(self, doc)
    }
}

/// A knowledge base plus exactly one injected blocking document, without
/// copying the base. Iteration order is base order followed by the injected
/// document.
#[derive(Debug, Clone, Copy)]
pub struct PoisonedView<'a> {
    base: &'a KnowledgeBase,
    blocking: &'a Document,
}

impl<'a> PoisonedView<'a> {
    pub fn new(base: &'a KnowledgeBase, blocking: &'a Document) -> Result<Self> {
        if base.contains(&blocking.id) {
            return Err(Error::validation(format!(
                "cannot inject '{}': id already present in '{}'",
                blocking.id, base.name
            )));
        }
        if blocking.provenance != Provenance::Blocking {
            return Err(Error::validation(format!(
                "injected document '{}' must carry blocking provenance",
                blocking.id
            )));
        }
        Ok(PoisonedView { base, blocking })
    }

    pub fn len(&self) -> usize {
        self.base.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn documents(&self) -> impl Iterator<Item = &'a Document> + '_ {
        self.base
            .documents()
            .iter()
            .chain(std::iter::once(self.blocking))
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    #[serde(default)]
    meta: Option<serde_json::Value>,
}

fn read_records(path: &Path) -> Result<Vec<(usize, RawRecord)>> {
    let file = File::open(path).map_err(|e| {
        Error::config(format!("cannot open {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| {
            Error::parse(path.display().to_string(), idx + 1, e.to_string())
        })?;
        if record.text.trim().is_empty() {
            return Err(Error::parse(
                path.display().to_string(),
                idx + 1,
                format!("record '{}' has empty text", record.id),
            ));
        }
        out.push((idx + 1, record));
    }
    Ok(out)
}

/// Load queries from a line-delimited record file, preserving file order.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let mut seen = HashMap::new();
    let mut queries = Vec::new();
    for (line, record) in read_records(path)? {
        if let Some(first) = seen.insert(record.id.clone(), line) {
            return Err(Error::validation(format!(
                "duplicate query id '{}' (lines {first} and {line} of {})",
                record.id,
                path.display()
            )));
        }
        queries.push(Query {
            id: record.id,
            text: record.text,
            meta: record.meta,
        });
    }
    Ok(queries)
}

/// Load a corpus from a line-delimited record file; every document is tagged
/// clean.
pub fn load_corpus(path: impl AsRef<Path>, name: impl Into<String>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    let mut kb = KnowledgeBase::new(name);
    for (line, record) in read_records(path)? {
        if kb.contains(&record.id) {
            return Err(Error::validation(format!(
                "duplicate document id '{}' (line {line} of {})",
                record.id,
                path.display()
            )));
        }
        kb.push(Document {
            id: record.id,
            text: record.text,
            provenance: Provenance::Clean,
            meta: record.meta,
        })?;
    }
    Ok(kb)
}
