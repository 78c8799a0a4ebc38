//! Plain-text `key value` files, shared by camera calibrations and pipeline
//! configuration. One pair per line; blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("line {line}: expected `key value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(key), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(KvError::Malformed { line: i + 1, text: raw.to_string() });
            };
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(KvError::Duplicate { line: i + 1, key: key.to_string() });
            }
        }
        Ok(KvFile { entries })
    }

    pub fn read(path: &Path) -> Result<Self, KvError> {
        let text = std::fs::read_to_string(path).map_err(|source| KvError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| KvError::BadValue {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        self.get(key)?.ok_or_else(|| KvError::Missing(key.to_string()))
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(KvError::Unknown(k.clone())),
            None => Ok(()),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}
