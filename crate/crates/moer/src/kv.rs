//! Flat `key = value` config files: one pair per line, `#` comments.
//! Used for training recipes, eval settings, and CLI run configs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub enum KvError {
    Malformed { line: usize, text: String },
    BadValue { key: String, value: String, expected: &'static str },
}

impl fmt::Display for KvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Malformed { line, text } => write!(f, "line {line}: expected 'key = value', got {text:?}"),
            Self::BadValue { key, value, expected } => {
                write!(f, "key '{key}': cannot parse {value:?} as {expected}")
            }
        }
    }
}

impl std::error::Error for KvError {}

/// Ordered key-value map parsed from a flat config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(KvError::Malformed { line: i + 1, text: raw.to_string() })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Typed lookup with a fallback default.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| KvError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                expected: std::any::type_name::<T>(),
            }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Render back to the file format (keys sorted).
    pub fn to_string_sorted(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
