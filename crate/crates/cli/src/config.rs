//! Flat `key=value` configuration. Values come from an optional file, then
//! `--set key=value` pairs, then dedicated flags; later sources win.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

pub const KNOWN_KEYS: &[&str] = &[
    // synthetic data
    "corpus_size",
    "num_queries",
    "num_topics",
    "doc_len",
    "query_len",
    "mismatch_rate",
    "pool_size",
    "focus_size",
    "test_queries",
    // features and encoder
    "feature_dim",
    "bigrams",
    "dim_emb",
    "layernorm",
    "sim",
    "seed",
    // training
    "lr",
    "optimizer",
    "batch_size",
    "grad_accum",
    "clip_norm",
    "refresh_interval",
    "refresh",
    "warmup_steps",
    "epochs",
    "max_steps",
    "sampler",
    "pool_k",
    "per_pos",
    "ann",
    "nprobe",
    "nlist",
    "kmeans_iters",
    "bm25_k1",
    "bm25_b",
    "log_triples",
    // passages and search
    "passages",
    "passage_window",
    "passage_stride",
    "max_passages",
    "search_mode",
    "k",
    "tag",
    // analysis
    "overlap_k",
    "num_batches",
    "intervals",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn check_key(key: &str) -> Result<(), CliError> {
    if KNOWN_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(CliError::Config(format!("unknown config key `{key}`")))
    }
}

impl Settings {
    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str, name: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{name}:{}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            check_key(k).map_err(|e| CliError::Config(format!("{name}:{}: {e}", i + 1)))?;
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::Config(format!("{name}:{}: key `{k}` set twice", i + 1)));
            }
        }
        Ok(Settings { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Settings::parse(&text, &p.display().to_string())
            }
        }
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{pair}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<(), CliError> {
        check_key(key)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Sets `key` when a dedicated flag was given.
    pub fn flag<T: Display>(&mut self, key: &str, value: Option<T>) -> Result<(), CliError> {
        match value {
            Some(v) => self.set(key, v),
            None => Ok(()),
        }
    }

    pub fn get<T>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| CliError::Config(format!("bad value `{v}` for `{key}`: {e}"))),
        }
    }

    pub fn get_opt<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Config(format!("bad value `{v}` for `{key}`: {e}")))
            })
            .transpose()
    }

    /// Comma-separated list.
    pub fn get_list<T>(&self, key: &str, default: &[T]) -> Result<Vec<T>, CliError>
    where
        T: FromStr + Clone,
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|e| CliError::Config(format!("bad list item `{x}` for `{key}`: {e}")))
                })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
