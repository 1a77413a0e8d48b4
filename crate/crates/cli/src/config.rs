//! Flat `key=value` run configuration: schema defaults, then an optional
//! config file, then command-line flags. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Result;
use mdd_core::KvMap;

/// A configuration problem (exit code 2), as opposed to a runtime failure.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Runs `f`, reclassifying any error it returns as a configuration error.
pub fn as_config<T>(f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e.downcast::<ConfigError>() {
        Ok(c) => c.into(),
        Err(e) => config_error(format!("{e:#}")),
    })
}

/// `(key, default)`; an empty default is filled in later from context
/// (dataset mode, output root, ...).
pub type Schema = &'static [(&'static str, &'static str)];

/// Default output root, overridable with `MDD_OUT_ROOT`.
pub fn out_root() -> PathBuf {
    std::env::var_os("MDD_OUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Debug, Clone)]
pub struct Resolved {
    kv: KvMap,
}

impl Resolved {
    /// Defaults, then the config file, then `overrides` (flag values that
    /// were given), then generic `--set key=value` pairs.
    pub fn build(schema: Schema, file: Option<&Path>, overrides: &[(&str, Option<String>)], sets: &[String]) -> Result<Self> {
        let mut kv = KvMap::new();
        for (k, v) in schema {
            kv.set(*k, *v);
        }
        let known = |k: &str| schema.iter().any(|(s, _)| *s == k);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read config file {}: {e}", path.display())))?;
            let parsed = KvMap::from_text(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            for (k, v) in parsed.iter() {
                if !known(k) {
                    return Err(config_error(format!("unknown config key `{k}` in {}", path.display())));
                }
                kv.set(k, v);
            }
        }
        for (k, v) in overrides {
            debug_assert!(known(k), "flag {k} missing from schema");
            if let Some(v) = v {
                kv.set(*k, v);
            }
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| config_error(format!("--set expects key=value, got `{s}`")))?;
            let k = k.trim();
            if !known(k) {
                return Err(config_error(format!("unknown config key `{k}`")));
            }
            kv.set(k, v.trim());
        }
        Ok(Self { kv })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.kv.set(key, value);
    }

    pub fn str(&self, key: &str) -> &str {
        self.kv.get(key).unwrap_or("")
    }

    pub fn is_unset(&self, key: &str) -> bool {
        self.str(key).is_empty()
    }

    /// Fills `key` with `value` when it has no explicit setting.
    pub fn default_to(&mut self, key: &str, value: impl ToString) {
        if self.is_unset(key) {
            self.kv.set(key, value);
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| config_error(format!("invalid value for `{key}`: `{raw}`")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.str(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| config_error(format!("invalid entry `{s}` in `{key}` = `{raw}`")))
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        if self.is_unset(key) {
            return Err(config_error(format!("`{key}` is required")));
        }
        Ok(PathBuf::from(self.str(key)))
    }

    /// Writes the fully resolved configuration as `key=value` text.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.kv.to_text())?;
        Ok(())
    }
}
