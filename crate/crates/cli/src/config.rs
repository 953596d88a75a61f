//! Flag and config-file merging. Files hold flat `key = value` lines with
//! `#` comments; keys are the long flag names with `-` or `_`. A flag given
//! on the command line wins over the same key in the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::Failure;

pub const KEYS: &[&str] = &[
    "data",
    "checkpoint",
    "out",
    "seed",
    "epochs",
    "batch",
    "lr",
    "momentum",
    "l2",
    "decay",
    "routing_iters",
    "threads",
    "init_std",
    "limit",
    "kernel",
    "hidden_channels",
    "capsules",
    "capsule_dim",
    "rows",
    "capsule",
    "restricted",
    "noise_out",
    "eps",
];

#[derive(Debug, Default)]
pub struct FileConfig {
    path: PathBuf,
    values: BTreeMap<String, (usize, String)>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{}:{}", path.display(), n + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("{}: expected key = value", at())))?;
            let key = k.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                return Err(Failure::usage(format!("{}: unknown key {key:?}", at())));
            }
            if values
                .insert(key.clone(), (n + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(Failure::usage(format!("{}: {key} set twice", at())));
            }
        }
        Ok(FileConfig {
            path: path.to_path_buf(),
            values,
        })
    }

    /// The flag if given, else the file value, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure> {
        debug_assert!(KEYS.contains(&key));
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| {
                Failure::usage(format!(
                    "{}:{line}: bad value {v:?} for {key}",
                    self.path.display()
                ))
            }),
        }
    }

    pub fn flag(&self, flag: bool, key: &str) -> Result<bool, Failure> {
        Ok(flag || self.pick::<bool>(None, key)?.unwrap_or(false))
    }
}
