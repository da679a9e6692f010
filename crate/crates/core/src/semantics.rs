//! Structured textual semantics: item names, item details and an overall
//! scene description.
//!
//! The binary form is what the bitstream charges to the semantics payload:
//!
//! ```text
//! u8 item count (1..=8)
//! per item: u16 BE len, UTF-8 name, u16 BE len, UTF-8 detail
//! u16 BE len, UTF-8 overall
//! ```
//!
//! Fixture files map an image content hash to a description, one record per
//! line: `<64 hex chars> TAB <JSON object>`, where the object is
//! `{"items":[{"name":..,"detail":..},..],"overall":..}`. Blank lines and
//! lines starting with `#` are ignored.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::RasterImage;

pub const MAX_ITEMS: usize = 8;
pub const MAX_NAME_WORDS: usize = 5;
pub const MAX_WORDS: usize = 80;
pub const TARGET_WORDS: usize = 60;

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("invalid description: {0}")]
    Invalid(String),
    #[error("malformed semantics payload: {0}")]
    MalformedPayload(String),
    #[error("no fixture entry for image hash {0}")]
    FixtureMissing(String),
    #[error("describer gateway unavailable: {0}")]
    GatewayUnavailable(String),
    #[error("fixture file line {line}: {reason}")]
    FixtureFormat { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticItem {
    pub name: String,
    pub detail: String,
}

impl SemanticItem {
    pub fn new(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            detail: detail.into(),
        }
    }

    /// Prompt used for per-item segmentation: name followed by detail.
    pub fn prompt(&self) -> String {
        if self.detail.trim().is_empty() {
            self.name.clone()
        } else {
            format!("{} {}", self.name, self.detail)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticDescription {
    pub items: Vec<SemanticItem>,
    pub overall: String,
}

impl SemanticDescription {
    /// Builds and validates a description.
    pub fn new(items: Vec<SemanticItem>, overall: impl Into<String>) -> Result<Self, SemanticsError> {
        let d = Self {
            items,
            overall: overall.into(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), SemanticsError> {
        if self.items.is_empty() || self.items.len() > MAX_ITEMS {
            return Err(SemanticsError::Invalid(format!(
                "{} items, expected 1..={MAX_ITEMS}",
                self.items.len()
            )));
        }
        for (j, item) in self.items.iter().enumerate() {
            let words = item.name.split_whitespace().count();
            if words == 0 {
                return Err(SemanticsError::Invalid(format!("item {j} has an empty name")));
            }
            if words > MAX_NAME_WORDS {
                return Err(SemanticsError::Invalid(format!(
                    "item {j} name has {words} words, max {MAX_NAME_WORDS}"
                )));
            }
        }
        for text in self.texts() {
            if let Some(ch) = text.chars().find(|c| c.is_control() && *c != '\n') {
                return Err(SemanticsError::Invalid(format!(
                    "control character U+{:04X}",
                    ch as u32
                )));
            }
            if text.len() > u16::MAX as usize {
                return Err(SemanticsError::Invalid("field longer than 65535 bytes".into()));
            }
        }
        let words = word_count(self);
        if words > MAX_WORDS {
            return Err(SemanticsError::Invalid(format!(
                "{words} words exceeds the cap of {MAX_WORDS}"
            )));
        }
        if words > TARGET_WORDS {
            log::warn!("description has {words} words, above the {TARGET_WORDS}-word target");
        }
        Ok(())
    }

    fn texts(&self) -> impl Iterator<Item = &str> {
        self.items
            .iter()
            .flat_map(|i| [i.name.as_str(), i.detail.as_str()])
            .chain(std::iter::once(self.overall.as_str()))
    }

    /// Text embedded for semantic alignment: overall description followed by
    /// every item name.
    pub fn alignment_text(&self) -> String {
        let mut s = self.overall.trim().to_string();
        for item in &self.items {
            if !s.is_empty() {
                s.push(' ');
            }
            s.push_str(item.name.trim());
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("description serializes")
    }
}

/// Whitespace-delimited token count over every field.
pub fn word_count(d: &SemanticDescription) -> usize {
    d.texts().map(|t| t.split_whitespace().count()).sum()
}

pub fn serialize(d: &SemanticDescription) -> Result<Vec<u8>, SemanticsError> {
    d.validate()?;
    let mut out = Vec::with_capacity(64);
    out.push(d.items.len() as u8);
    let mut put = |s: &str| {
        out.extend_from_slice(&(s.len() as u16).to_be_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    for item in &d.items {
        put(&item.name);
        put(&item.detail);
    }
    put(&d.overall);
    Ok(out)
}

pub fn deserialize(bytes: &[u8]) -> Result<SemanticDescription, SemanticsError> {
    let malformed = |m: &str| SemanticsError::MalformedPayload(m.to_string());
    let (&count, mut rest) = bytes.split_first().ok_or_else(|| malformed("empty payload"))?;
    let count = count as usize;
    if count == 0 || count > MAX_ITEMS {
        return Err(malformed(&format!("item count {count}")));
    }
    let mut take = || -> Result<String, SemanticsError> {
        if rest.len() < 2 {
            return Err(malformed("truncated length prefix"));
        }
        let len = u16::from_be_bytes([rest[0], rest[1]]) as usize;
        if rest.len() < 2 + len {
            return Err(malformed("truncated string"));
        }
        let s = std::str::from_utf8(&rest[2..2 + len])
            .map_err(|_| malformed("invalid UTF-8"))?
            .to_string();
        rest = &rest[2 + len..];
        Ok(s)
    };
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let name = take()?;
        let detail = take()?;
        items.push(SemanticItem { name, detail });
    }
    let overall = take()?;
    if !rest.is_empty() {
        return Err(malformed("trailing bytes"));
    }
    let d = SemanticDescription { items, overall };
    d.validate().map_err(|e| SemanticsError::MalformedPayload(e.to_string()))?;
    Ok(d)
}

/// Source of semantic descriptions for the encoder.
pub trait Describer: Send + Sync {
    fn describe(&self, image: &RasterImage) -> Result<SemanticDescription, SemanticsError>;
}

/// Deterministic describer backed by a fixtures file keyed by content hash.
#[derive(Clone, Debug, Default)]
pub struct FixtureDescriber {
    entries: HashMap<String, SemanticDescription>,
}

impl FixtureDescriber {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, hash: impl Into<String>, d: SemanticDescription) {
        self.entries.insert(hash.into(), d);
    }

    pub fn insert_image(&mut self, image: &RasterImage, d: SemanticDescription) {
        self.insert(image.content_hash(), d);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self, SemanticsError> {
        let mut out = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| SemanticsError::FixtureFormat { line: n + 1, reason };
            let (hash, json) = line
                .split_once('\t')
                .ok_or_else(|| bad("missing TAB separator".into()))?;
            if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(bad(format!("bad hash {hash:?}")));
            }
            let d: SemanticDescription =
                serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
            d.validate().map_err(|e| bad(e.to_string()))?;
            out.insert(hash.to_ascii_lowercase(), d);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, SemanticsError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Renders in the fixture file format, sorted by hash.
    pub fn render(&self) -> String {
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            let _ = writeln!(out, "{k}\t{}", self.entries[k].to_json());
        }
        out
    }
}

impl Describer for FixtureDescriber {
    fn describe(&self, image: &RasterImage) -> Result<SemanticDescription, SemanticsError> {
        let hash = image.content_hash();
        self.entries
            .get(&hash)
            .cloned()
            .ok_or(SemanticsError::FixtureMissing(hash))
    }
}
