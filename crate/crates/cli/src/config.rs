//! Flat key-value experiment configuration: `key = value` lines with `#`
//! comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use costfolio::{Error, Result};

#[derive(Debug, Clone)]
pub struct Config {
    map: BTreeMap<String, String>,
    pub dir: PathBuf,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (idx, line) in raw.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self {
            map,
            dir: path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
        })
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.map.insert(key.to_string(), value);
    }

    pub fn opt_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.opt_str(key).unwrap_or(default).to_string()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        raw.parse()
            .map_err(|e| Error::Config(format!("field '{key}': bad value '{raw}': {e}")))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.opt_str(key) {
            None => Ok(default),
            Some(raw) => self.parse(key, raw),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.opt_str(key) {
            None => Ok(default),
            Some(raw) => self.parse(key, raw),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.opt_str(key) {
            None => Ok(default),
            Some(raw) => self.parse(key, raw),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.opt_str(key) {
            None => Ok(default),
            Some(raw) => match raw {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(Error::Config(format!(
                    "field '{key}': bad boolean '{other}'"
                ))),
            },
        }
    }

    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.opt_str(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|x| self.parse(key, x.trim()))
                .collect(),
        }
    }

    pub fn str_list_or(&self, key: &str, default: &[&str]) -> Vec<String> {
        match self.opt_str(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(raw) => raw.split(',').map(|x| x.trim().to_string()).collect(),
        }
    }

    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.opt_str(key).map(|raw| {
            let p = PathBuf::from(raw);
            if p.is_absolute() {
                p
            } else {
                self.dir.join(p)
            }
        })
    }

    /// Hash of the canonical key-value set. The output directory is not
    /// part of the experiment identity.
    pub fn hash(&self) -> u64 {
        costfolio::io::config_hash(
            self.map
                .iter()
                .filter(|(k, _)| k.as_str() != "out_dir")
                .map(|(k, v)| (k.as_str(), v.as_str())),
        )
    }
}
