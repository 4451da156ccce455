//! Flat `key = value` configuration files.
//!
//! One key per line, `#` starts a comment. The same file may carry scenario,
//! model and training keys; each consumer takes the keys it knows and
//! [`KvConfig::finish`] rejects whatever is left.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{k}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.entries.remove(key).as_deref() {
            None => Ok(default),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(v) => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
        }
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<_> = self.entries.into_keys().collect();
            Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
        }
    }
}

/// Short stable digest used to tag artifacts with their configuration.
pub fn config_hash(canonical_text: &str) -> String {
    let digest = Sha256::digest(canonical_text.as_bytes());
    hex::encode(&digest[..8])
}

pub(crate) fn fmt_f64(x: f64) -> String {
    // `{:?}` round-trips exactly.
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_leftovers() {
        let mut kv = KvConfig::parse("# header\nB = 2\nP_max=10.5 # watts\n\nstray = 1\n").unwrap();
        assert_eq!(kv.take::<usize>("B").unwrap(), Some(2));
        assert_eq!(kv.take::<f64>("P_max").unwrap(), Some(10.5));
        assert!(kv.finish().is_err());
    }

    #[test]
    fn malformed_lines_are_config_errors() {
        assert!(KvConfig::parse("B 2").unwrap_err().is_config());
        assert!(KvConfig::parse("B = 1\nB = 2").is_err());
        let mut kv = KvConfig::parse("B = two").unwrap();
        assert!(kv.take::<usize>("B").is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("a"), config_hash("a"));
        assert_ne!(config_hash("a"), config_hash("b"));
        assert_eq!(config_hash("a").len(), 16);
    }
}
