//! Flat `key=value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Keys are
//! kept in insertion order so a parsed file can be written back unchanged.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Malformed {
                file: file.to_string(),
                line: idx + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Malformed {
                    file: file.to_string(),
                    line: idx + 1,
                    message: "empty key".into(),
                });
            }
            if kv.get(key).is_some() {
                return Err(Error::Malformed {
                    file: file.to_string(),
                    line: idx + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
            kv.entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Inserts or replaces `key`.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    /// The entries whose keys are in `keys`, in their original order.
    pub fn subset(&self, keys: &[&str]) -> KeyValues {
        KeyValues {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keys.contains(&k.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Parses `key` if present.
    pub fn parse_opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{raw}`: {e}"))),
        }
    }

    /// Rejects keys outside `allowed`; typos in config files otherwise go unnoticed.
    pub fn ensure_known(&self, allowed: &[&str]) -> Result<()> {
        for key in self.keys() {
            if !allowed.contains(&key) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Parses `lo..hi` (inclusive) or `lo,hi` into an ordered pair.
pub fn parse_range(raw: &str) -> Result<(usize, usize)> {
    let (lo, hi) = raw
        .split_once("..")
        .or_else(|| raw.split_once(','))
        .ok_or_else(|| Error::Config(format!("expected a range `lo..hi`, got `{raw}`")))?;
    let lo: usize = lo
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad range start in `{raw}`")))?;
    let hi: usize = hi
        .trim()
        .trim_start_matches('=')
        .parse()
        .map_err(|_| Error::Config(format!("bad range end in `{raw}`")))?;
    if lo > hi {
        return Err(Error::Config(format!("empty range `{raw}`")));
    }
    Ok((lo, hi))
}

/// Parses a comma-separated list of values.
pub fn parse_list<T>(raw: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::Config(format!("cannot parse list item `{s}`: {e}")))
        })
        .collect()
}
