//! `key = value` configuration documents.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment            (also allowed after a value)
//! key = value          (top level, or inside the current section)
//! [section]            (opens a section; a name may repeat, e.g. [object])
//! ```
//!
//! Keys are `[A-Za-z0-9_-]+`; values are trimmed and may be empty.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    /// `None` for the top-level block.
    pub name: Option<String>,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Document {
    pub sections: Vec<Section>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Document {
    pub fn parse(text: &str) -> Result<Document> {
        let mut sections = vec![Section { name: None, line: 0, entries: Vec::new() }];
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| valid_key(n))
                    .ok_or_else(|| Error::Config(format!("line {line}: malformed section header")))?;
                sections.push(Section { name: Some(name.to_string()), line, entries: Vec::new() });
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let key = k.trim();
            if !valid_key(key) {
                return Err(Error::Config(format!("line {line}: invalid key {key:?}")));
            }
            let section = sections.last_mut().expect("top-level section always present");
            if section.entries.iter().any(|e| e.key == key) {
                return Err(Error::Config(format!("line {line}: duplicate key {key:?}")));
            }
            section.entries.push(Entry { key: key.to_string(), value: v.trim().to_string(), line });
        }
        Ok(Document { sections })
    }

    pub fn top(&self) -> &Section {
        &self.sections[0]
    }

    pub fn named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name.as_deref() == Some(name))
    }
}

impl Entry {
    pub fn parse<T: FromStr>(&self) -> Result<T> {
        self.value.parse().map_err(|_| {
            Error::Config(format!(
                "line {}: cannot parse {:?} for key {:?}",
                self.line, self.value, self.key
            ))
        })
    }

    pub fn unknown(&self) -> Error {
        Error::Config(format!("line {}: unknown key {:?}", self.line, self.key))
    }
}

/// Parse a boolean in the spellings config files commonly use.
pub fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Some(true),
        "0" | "false" | "no" | "off" => Some(false),
        _ => None,
    }
}
