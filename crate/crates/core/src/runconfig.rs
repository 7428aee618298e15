//! Flat `key = value` run configuration: `#` comments, no nesting.
//! Explicit CLI flags override file values, and every run emits its fully
//! resolved configuration next to the outputs.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunConfigError {
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("unknown key {key:?} (known: {known})")]
    UnknownKey { key: String, known: String },
    #[error("key {key:?}: cannot parse {value:?}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// Ordered key-value document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, RunConfigError> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(RunConfigError::Malformed { line: idx + 1 });
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(RunConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self, RunConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| RunConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Reject any key outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<(), RunConfigError> {
        for key in self.values.keys() {
            if !known.contains(&key.as_str()) {
                return Err(RunConfigError::UnknownKey {
                    key: key.clone(),
                    known: known.join(", "),
                });
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Insert only when the key is absent (flags take precedence, so they
    /// are written first and file values fill the gaps).
    pub fn set_default(&mut self, key: &str, value: impl ToString) {
        self.values
            .entry(key.to_string())
            .or_insert_with(|| value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get_parsed<T>(&self, key: &str) -> Result<Option<T>, RunConfigError>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                RunConfigError::BadValue {
                    key: key.to_string(),
                    value: raw.clone(),
                    reason: e.to_string(),
                }
            }),
        }
    }

    /// Render as sorted `key = value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.values {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(value);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), RunConfigError> {
        std::fs::write(path, self.render()).map_err(|source| RunConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let cfg = RunConfig::parse("# a comment\nseed = 7\n\nk-shot = 5\n").unwrap();
        assert_eq!(cfg.get("seed"), Some("7"));
        assert_eq!(cfg.get_parsed::<usize>("k-shot").unwrap(), Some(5));
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(matches!(
            RunConfig::parse("seed 7"),
            Err(RunConfigError::Malformed { line: 1 })
        ));
    }

    #[test]
    fn unknown_keys_rejected() {
        let cfg = RunConfig::parse("seeed = 7").unwrap();
        assert!(matches!(
            cfg.check_keys(&["seed"]),
            Err(RunConfigError::UnknownKey { .. })
        ));
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg = RunConfig::parse("seed = 7\nk-shot = 5").unwrap();
        // flag value lands before file merge
        let mut flags = RunConfig::new();
        flags.set("seed", 9);
        for (k, v) in cfg.values.iter() {
            flags.set_default(k, v);
        }
        cfg = flags;
        assert_eq!(cfg.get("seed"), Some("9"));
        assert_eq!(cfg.get("k-shot"), Some("5"));
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::new();
        cfg.set("seed", 3);
        cfg.set("dataset", "/data/shapes");
        let rendered = cfg.render();
        assert_eq!(RunConfig::parse(&rendered).unwrap(), cfg);
    }
}
