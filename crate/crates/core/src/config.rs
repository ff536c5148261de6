//! `key = value` configuration text.
//!
//! Blank lines and `#` comments are ignored; later keys override earlier
//! ones when overlaid.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        let mut pos = 0;
        for (lineno, raw) in text.split_inclusive('\n').enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                    kind: "config",
                    pos,
                    msg: format!("line {}: expected `key = value`", lineno + 1),
                })?;
                let key = k.trim();
                if key.is_empty() || key.contains(char::is_whitespace) {
                    return Err(Error::Format {
                        kind: "config",
                        pos,
                        msg: format!("line {}: bad key `{key}`", lineno + 1),
                    });
                }
                kv.set(key, v.trim());
            }
            pos += raw.len();
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parse `key` if present.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`")))
            })
            .transpose()
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    pub fn overlay(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Canonical text: sorted keys, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
