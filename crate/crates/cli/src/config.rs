//! `--config` file support: a `key=value` file supplies values for any
//! flag the user did not pass explicitly; explicit flags always win.
//!
//! Keys are the long flag names of the active subcommand (underscores are
//! accepted as dashes). Every key must be consumed by the command, so a
//! typo or a key belonging to a different subcommand fails fast instead
//! of being silently ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::errors::{CliError, CliResult};

pub struct ConfigFile {
    /// Key → (value, consumed flag).
    map: BTreeMap<String, (String, bool)>,
    path: String,
}

impl ConfigFile {
    /// Load `path`, or produce an empty file when no `--config` was given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile {
                map: BTreeMap::new(),
                path: String::new(),
            });
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Data(format!("config {}: {e}", path.display()))
        })?;
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Data(format!(
                    "config {}:{}: expected key=value, got `{line}`",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim().replace('_', "-");
            let value = value.trim().to_string();
            if map.insert(key.clone(), (value, false)).is_some() {
                return Err(CliError::Data(format!(
                    "config {}:{}: duplicate key `{key}`",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(ConfigFile {
            map,
            path: path.display().to_string(),
        })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.map.get_mut(key).map(|(v, used)| {
            *used = true;
            v.clone()
        })
    }

    fn parse<T: FromStr>(&self, key: &str, value: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        value.parse().map_err(|e| {
            CliError::Usage(format!(
                "config {}: key `{key}` has invalid value `{value}`: {e}",
                self.path
            ))
        })
    }

    /// Flag value, else config value, else the default.
    pub fn resolve<T: FromStr>(
        &mut self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.resolve_opt(flag, key)?.unwrap_or(default))
    }

    /// Flag value, else config value, else `None`.
    pub fn resolve_opt<T: FromStr>(
        &mut self,
        flag: Option<T>,
        key: &str,
    ) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            self.raw(key); // flag shadows the config value; mark it used
            return Ok(flag);
        }
        match self.raw(key) {
            Some(v) => Ok(Some(self.parse(key, &v)?)),
            None => Ok(None),
        }
    }

    /// Flag value, else config value, else a usage error naming the flag.
    pub fn require<T: FromStr>(&mut self, flag: Option<T>, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.resolve_opt(flag, key)?.ok_or_else(|| {
            CliError::Usage(format!("missing required --{key} (flag or config key)"))
        })
    }

    /// A boolean switch: `true` once the flag is present, else the config
    /// value (`true`/`false`/`1`/`0`).
    pub fn resolve_switch(&mut self, flag: bool, key: &str) -> CliResult<bool> {
        if flag {
            self.raw(key);
            return Ok(true);
        }
        match self.raw(key) {
            None => Ok(false),
            Some(v) => match v.as_str() {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                other => Err(CliError::Usage(format!(
                    "config {}: key `{key}` must be true/false/1/0, got `{other}`",
                    self.path
                ))),
            },
        }
    }

    /// Fail on any key the command never consumed.
    pub fn finish(&self) -> CliResult<()> {
        let unused: Vec<&str> = self
            .map
            .iter()
            .filter(|(_, (_, used))| !used)
            .map(|(k, _)| k.as_str())
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "config {}: key(s) not recognized by this command: {}",
                self.path,
                unused.join(", ")
            )))
        }
    }
}

/// `dir/name.ext` → `dir/name.suffix` (used to place the split manifest
/// and trial list next to a generated archive).
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    path.with_file_name(format!("{stem}.{suffix}"))
}
