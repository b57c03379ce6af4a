//! Flat `key = value` text configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Later assignments override earlier ones, which is also how command-line
//! `--key value` overrides are applied.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            cfg.set(k, v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn merge(&mut self, other: &FlatConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Entries whose key starts with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> FlatConfig {
        let mut out = FlatConfig::new();
        for (k, v) in &self.entries {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.set(rest, v);
            }
        }
        out
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{key}` from `{v}`"))),
        }
    }

    pub fn list_or<T: FromStr + Clone>(&self, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => split_list(v)
                .map(|tok| {
                    tok.parse()
                        .map_err(|_| Error::Config(format!("cannot parse `{key}` item `{tok}`")))
                })
                .collect(),
        }
    }

    pub fn pair_or(&self, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
        let v = self.list_or(key, &[default.0, default.1])?;
        match v.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(Error::Config(format!("`{key}` needs exactly 2 values"))),
        }
    }

    pub fn triple_or(&self, key: &str, default: [f64; 3]) -> Result<[f64; 3]> {
        let v = self.list_or(key, &default)?;
        match v.as_slice() {
            [a, b, c] => Ok([*a, *b, *c]),
            _ => Err(Error::Config(format!("`{key}` needs exactly 3 values"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(v) => Err(Error::Config(format!("`{key}` is not a boolean: `{v}`"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Splits on commas and/or whitespace.
pub fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = FlatConfig::parse("# header\na = 1\nb = 2 3 # trailing\n\na = 4\n").unwrap();
        assert_eq!(cfg.get("a"), Some("4"));
        assert_eq!(cfg.list_or::<i32>("b", &[]).unwrap(), vec![2, 3]);
    }

    #[test]
    fn rejects_line_without_equals() {
        let err = FlatConfig::parse("a = 1\nnonsense\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn section_strips_prefix() {
        let cfg = FlatConfig::parse("grid.x = 1\ngrid.y = 2\nother = 3").unwrap();
        let s = cfg.section("grid.");
        assert_eq!(s.get("x"), Some("1"));
        assert!(s.get("other").is_none());
    }
}
