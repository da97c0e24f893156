//! Campaign transcript: the append-only record of every backend call.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::RoleKind;

/// One attempt within a call; retried calls log every attempt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatAttempt {
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub latency_ms: u64,
}

/// One completed backend call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatExchange {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    pub role: RoleKind,
    pub backend_id: String,
    pub template_id: String,
    pub template_hash: String,
    pub rendered_prompt: String,
    pub response_text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_ms: u64,
    pub attempts: Vec<ChatAttempt>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Aggregate usage over a set of exchanges.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl UsageTotals {
    pub fn tokens(&self) -> u64 {
        self.tokens_in + self.tokens_out
    }

    pub fn add_exchange(&mut self, ex: &ChatExchange) {
        self.calls += 1;
        self.tokens_in += ex.tokens_in;
        self.tokens_out += ex.tokens_out;
    }
}

/// Single-writer append log of exchanges.
#[derive(Default)]
pub struct Transcript {
    exchanges: Mutex<Vec<ChatExchange>>,
    next_seq: AtomicU64,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq.fetch_add(1, Ordering::SeqCst)
    }

    pub fn append(&self, exchange: ChatExchange) {
        self.exchanges.lock().unwrap().push(exchange);
    }

    pub fn len(&self) -> usize {
        self.exchanges.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<ChatExchange> {
        self.exchanges.lock().unwrap().clone()
    }

    pub fn totals(&self) -> UsageTotals {
        let mut totals = UsageTotals::default();
        for ex in self.exchanges.lock().unwrap().iter() {
            totals.add_exchange(ex);
        }
        totals
    }

    /// Usage grouped by the query each exchange was tagged with.
    pub fn totals_by_query(&self) -> BTreeMap<String, UsageTotals> {
        let mut out: BTreeMap<String, UsageTotals> = BTreeMap::new();
        for ex in self.exchanges.lock().unwrap().iter() {
            if let Some(qid) = &ex.query_id {
                out.entry(qid.clone()).or_default().add_exchange(ex);
            }
        }
        out
    }

    /// Persist as line-delimited records, one exchange per line, after an
    /// optional provenance header line.
    pub fn save(&self, path: impl AsRef<Path>, header: Option<&serde_json::Value>) -> Result<()> {
        let mut out = String::new();
        if let Some(header) = header {
            out.push_str(&serde_json::to_string(header).unwrap());
            out.push('\n');
        }
        for ex in self.exchanges.lock().unwrap().iter() {
            out.push_str(&serde_json::to_string(ex).unwrap());
            out.push('\n');
        }
        let mut file = File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Load exchanges persisted by [`save`](Self::save); a provenance header
    /// line (no `seq` field) is skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Vec<ChatExchange>> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let mut out = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if idx == 0 {
                if let Ok(value) = serde_json::from_str::<serde_json::Value>(&line) {
                    if value.get("seq").is_none() {
                        continue; // header
                    }
                }
            }
            let ex: ChatExchange = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path.display().to_string(), idx + 1, e.to_string()))?;
            out.push(ex);
        }
        Ok(out)
    }
}
