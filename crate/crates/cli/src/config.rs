//! `key = value` run configuration with flag overrides.
//!
//! Files are UTF-8, one pair per line, `#` starts a comment. Every key must
//! be consumed by the command reading it; leftovers are hard errors so typos
//! never silently fall back to defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use imt_core::{Error, Result};

#[derive(Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
    used: RefCell<HashSet<String>>,
}

impl KvConfig {
    pub fn from_file(path: &Path) -> Result<KvConfig> {
        let text = std::fs::read_to_string(path)?;
        KvConfig::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<KvConfig> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key: {}", key)));
            }
        }
        Ok(KvConfig {
            map,
            used: RefCell::new(HashSet::new()),
        })
    }

    /// Apply `key=value` overrides (command-line flags win over the file).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", item)))?;
            self.map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.map.insert(key.to_string(), value);
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let v = self.map.get(key);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v.map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .ok_or_else(|| Error::Config(format!("missing required key: {}", key)))
    }

    pub fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {}: {}", key, v))),
        }
    }

    /// Reject any key no command consumed.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .map
            .keys()
            .filter(|k| !used.contains(*k))
            .map(|k| k.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    /// Fully-resolved config echo written into the run directory.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(out, "{} = {}", k, v);
        }
        out
    }
}
