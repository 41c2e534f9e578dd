//! Plain-text `key=value` config files.
//!
//! One `key=value` pair per line; blank lines and `#` comments are ignored.
//! Used for world specs and training configs.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::{Error, Result};

pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing config key {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value {raw:?} for config key {key:?}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("bad value {raw:?} for config key {key:?}"))),
        }
    }
}
