//! Ordered flat `key=value` text, used for config files, manifests and
//! metadata blocks embedded in binary files.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `key`, keeping first-insertion order.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::format(format!("missing key `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::format(format!("cannot parse `{key}` = `{raw}`")))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn extend(&mut self, other: &KvMap) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = KvMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("line {}: expected key=value", lineno + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::format(format!("line {}: empty key", lineno + 1)));
            }
            if map.contains(k) {
                return Err(Error::format(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
            map.set(k, v.trim());
        }
        Ok(map)
    }
}

/// Shortest decimal text that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_preserves_order() {
        let mut m = KvMap::new();
        m.set("b", 2);
        m.set("a", "x y");
        m.set("b", 3);
        let text = m.to_text();
        assert_eq!(text, "b=3\na=x y\n");
        assert_eq!(KvMap::from_text(&text).unwrap(), m);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvMap::from_text("novalue").is_err());
        assert!(KvMap::from_text("=1").is_err());
        assert!(KvMap::from_text("a=1\na=2").is_err());
        let m = KvMap::from_text("# comment\n\n lr = 2e-5 \n").unwrap();
        assert_eq!(m.parse::<f64>("lr").unwrap(), 2e-5);
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1e-4, 0.02, 1.0 / 3.0, 4.035829765375683e-5] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
