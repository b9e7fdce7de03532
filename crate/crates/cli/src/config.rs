//! `key = value` config files and flag/file/default resolution.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

/// Parsed config file. Keys are normalized so `lambda-p` and `lambda_p`
/// name the same setting.
#[derive(Debug, Default)]
pub struct ConfigFile {
    path: Option<PathBuf>,
    values: BTreeMap<String, (usize, String)>,
    used: RefCell<BTreeSet<String>>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl ConfigFile {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| CliError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = normalize(k);
            if key.is_empty() {
                return Err(err("empty key".into()));
            }
            if values.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            values,
            used: RefCell::default(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::empty()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text, p)
            }
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(&normalize(key))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        let key = normalize(key);
        let Some((line, raw)) = self.values.get(&key) else {
            return Ok(None);
        };
        self.used.borrow_mut().insert(key.clone());
        raw.parse().map(Some).map_err(|_| CliError::Parse {
            path: self.path.clone().unwrap_or_default(),
            line: *line,
            reason: format!("cannot parse `{raw}` for `{key}`"),
        })
    }

    /// Errors on keys that no setting consumed, which are usually typos.
    pub fn reject_unused(&self) -> Result<(), CliError> {
        let used = self.used.borrow();
        match self.values.iter().find(|(k, _)| !used.contains(*k)) {
            None => Ok(()),
            Some((k, (line, _))) => Err(CliError::Parse {
                path: self.path.clone().unwrap_or_default(),
                line: *line,
                reason: format!("unknown key `{k}`"),
            }),
        }
    }

    /// Flag value if given, else the file's value, else `default`.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        let from_file = self.get(key)?;
        Ok(flag.or(from_file).unwrap_or(default))
    }

    pub fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        let from_file = self.get(key)?;
        Ok(flag.or(from_file))
    }
}
