//! Flat `key=value` text files used for configs, scene specs and run manifests.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

/// An ordered list of `key=value` entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses the text form. Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if kv.get(k).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            kv.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    /// Sets a key, replacing an existing value in place.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Parses the value for `key`, or returns `default` when absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{key}={v}`"))),
        }
    }

    /// Parses a comma-separated list value.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse `{key}={v}`")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Fails if any key is outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

impl std::fmt::Display for KeyValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        f.write_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_keeps_order() {
        let kv = KeyValues::parse("# hi\nb=2\n\na = x y\n").unwrap();
        assert_eq!(kv.keys().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(kv.get("a"), Some("x y"));
        assert_eq!(kv.get_or("b", 0u32).unwrap(), 2);
        assert_eq!(KeyValues::parse(&kv.to_string()).unwrap(), kv);
    }

    #[test]
    fn lists_and_errors() {
        let kv = KeyValues::parse("res_counts=3,3,5,2").unwrap();
        assert_eq!(kv.get_list::<usize>("res_counts").unwrap(), Some(vec![3, 3, 5, 2]));
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        assert!(kv.get_or::<f32>("res_counts", 0.0).is_err());
    }
}
