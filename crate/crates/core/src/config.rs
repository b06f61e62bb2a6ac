//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Later keys override
//! earlier ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Hyper;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(FlatConfig { entries })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::validation(format!("invalid value {v:?} for {key}"))),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::validation(format!("invalid list item {s:?} for {key}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Fails on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::validation(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn apply_train(&self, c: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.get("batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = self.get("epochs")? {
            c.epochs = v;
        }
        if let Some(v) = self.get("lr")? {
            c.lr = v;
        }
        if let Some(v) = self.get("lr_decay")? {
            c.lr_decay = v;
        }
        if let Some(v) = self.get_list("decay_epochs")? {
            c.decay_epochs = v;
        }
        if let Some(v) = self.get("max_grad_norm")? {
            c.max_grad_norm = v;
        }
        if let Some(v) = self.get("optimizer")? {
            c.optimizer = v;
        }
        if let Some(v) = self.get("seed")? {
            c.seed = v;
        }
        if let Some(v) = self.get("teacher_forcing")? {
            c.teacher_forcing = v;
        }
        if let Some(v) = self.get("threads")? {
            c.threads = v;
        }
        c.validate()
    }

    pub fn apply_hyper(&self, h: &mut Hyper) -> Result<()> {
        if let Some(v) = self.get("k")? {
            h.k = v;
        }
        if let Some(v) = self.get("num_layers")? {
            h.num_layers = v;
        }
        if let Some(v) = self.get("units")? {
            h.units = v;
        }
        if let Some(v) = self.get("input_horizon")? {
            h.input_horizon = v;
        }
        if let Some(v) = self.get("output_horizon")? {
            h.output_horizon = v;
        }
        h.validate()
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "epochs",
    "lr",
    "lr_decay",
    "decay_epochs",
    "max_grad_norm",
    "optimizer",
    "seed",
    "teacher_forcing",
    "threads",
];

pub const HYPER_KEYS: &[&str] = &["k", "num_layers", "units", "input_horizon", "output_horizon"];
