//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are skipped. Keys use the long flag
//! names with `-` or `_`; a flag given on the command line wins over the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use snds_core::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, (usize, String)>,
    path: String,
}

pub const KNOWN_KEYS: &[&str] = &[
    "epochs",
    "seed",
    "seeds",
    "batch_size",
    "learning_rate",
    "clip",
    "horizon",
    "srvf",
    "mode",
    "projection",
    "alpha",
    "regularizer",
    "delta",
    "policy_sizes",
    "icnn_sizes",
    "patience",
];

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl ConfigFile {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse { path: path.into(), line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = normalize(key);
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(err(format!("unknown key {key:?}")));
            }
            if values.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(err(format!("duplicate key {key:?}")));
            }
        }
        Ok(Self { values, path: path.into() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parsed value of `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((line, raw)) = self.values.get(key) else {
            return Ok(None);
        };
        raw.parse().map(Some).map_err(|e| Error::Parse {
            path: self.path.clone().into(),
            line: *line,
            message: format!("bad value for {key}: {e}"),
        })
    }

    /// Comma-separated list under `key`.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((line, raw)) = self.values.get(key) else {
            return Ok(None);
        };
        parse_list(raw).map(Some).map_err(|message| Error::Parse {
            path: self.path.clone().into(),
            line: *line,
            message: format!("bad value for {key}: {message}"),
        })
    }
}

pub fn parse_list<T: FromStr>(raw: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_typed_values_and_lists() {
        let cfg = ConfigFile::parse("# comment\nepochs = 20\n\nlearning-rate=0.01\npolicy_sizes = 2, 8, 2\n", "c.txt").unwrap();
        assert_eq!(cfg.get::<usize>("epochs").unwrap(), Some(20));
        assert_eq!(cfg.get::<f64>("learning_rate").unwrap(), Some(0.01));
        assert_eq!(cfg.get_list::<usize>("policy_sizes").unwrap(), Some(vec![2, 8, 2]));
        assert_eq!(cfg.get::<u64>("seed").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_lines() {
        assert!(matches!(ConfigFile::parse("nope = 1", "c"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(ConfigFile::parse("seed = 1\nseed = 2", "c"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(ConfigFile::parse("\nepochs", "c"), Err(Error::Parse { line: 2, .. })));
        let cfg = ConfigFile::parse("epochs = many", "c").unwrap();
        assert!(matches!(cfg.get::<usize>("epochs"), Err(Error::Parse { line: 1, .. })));
    }
}
