//! Line-oriented `key = value` text used for robot profiles and run configs.
//! `#` starts a comment; blank lines are ignored; later keys override earlier ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    pub source: String,
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    file: source.to_string(),
                    msg: format!("line {}: expected `key = value`", lineno + 1),
                });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse { file: source.to_string(), msg: format!("line {}: empty key", lineno + 1) });
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { source: source.to_string(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Entries under `prefix`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvFile {
        let entries = self.entries.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone()))).collect();
        KvFile { source: self.source.clone(), entries }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| Error::Parse {
                file: self.source.clone(),
                msg: format!("bad value for `{key}`: {v:?}"),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Parse { file: self.source.clone(), msg: format!("missing key `{key}`") })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = KvFile::parse("t", "# header\nlink.1.mass = 1.2  # kg\n\nlink.1.mass=1.5\nname = a b\n").unwrap();
        assert_eq!(kv.get::<f64>("link.1.mass").unwrap(), Some(1.5));
        assert_eq!(kv.raw("name"), Some("a b"));
        assert!(kv.require::<f64>("missing").is_err());
        assert!(KvFile::parse("t", "no equals here").is_err());
        assert!(kv.get::<f64>("name").is_err());
    }
}
