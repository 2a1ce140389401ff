//! Line-delimited `key=value` records and flat key-value documents.
//!
//! A *record* is a single line of space-separated `key=value` pairs; values
//! must not contain spaces (they are numbers or short identifiers). Reals are
//! formatted with Rust's shortest round-trip notation, so parsing a record
//! back recovers bitwise-identical values.
//!
//! A *document* is one `key=value` per line ('#' comments and blank lines
//! ignored); values may contain anything after the first '='. Used for config
//! files and run manifests.

use crate::error::{CoreError, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record {
    fields: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Record::default()
    }

    pub fn push(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let v = value.to_string();
        debug_assert!(!key.contains([' ', '=']), "bad record key {key:?}");
        debug_assert!(!v.contains(' '), "record value with space: {v:?}");
        self.fields.push((key.to_string(), v));
        self
    }

    pub fn to_line(&self) -> String {
        self.fields
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(line: &str) -> Result<Record> {
        let mut fields = Vec::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| CoreError::Config(format!(
                "record token '{tok}' is not key=value"
            )))?;
            fields.push((k.to_string(), v.to_string()));
        }
        Ok(Record { fields })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_real(&self, key: &str) -> Result<Real> {
        let v = self
            .get(key)
            .ok_or_else(|| CoreError::Config(format!("record missing field '{key}'")))?;
        v.parse::<Real>()
            .map_err(|e| CoreError::Config(format!("field '{key}'='{v}': {e}")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|(k, _)| k.as_str())
    }
}

/// Parse a flat key-value document: `key=value` per line, `#` comments and
/// blank lines skipped, whitespace around the key and value trimmed.
pub fn parse_kv_document(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CoreError::Config(format!(
            "line {}: '{line}' is not key=value",
            lineno + 1
        )))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_kv_document(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s
}
