use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Closed set of runnable experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    SmeVsLindblad,
    FilterEquivalence,
    RapidPurification,
    Dolinar,
    ResonatorCooling,
    AtomCooling,
    GammaScan,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::SmeVsLindblad,
        ScenarioKind::FilterEquivalence,
        ScenarioKind::RapidPurification,
        ScenarioKind::Dolinar,
        ScenarioKind::ResonatorCooling,
        ScenarioKind::AtomCooling,
        ScenarioKind::GammaScan,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::SmeVsLindblad => "sme-vs-lindblad",
            ScenarioKind::FilterEquivalence => "filter-equivalence",
            ScenarioKind::RapidPurification => "rapid-purification",
            ScenarioKind::Dolinar => "dolinar",
            ScenarioKind::ResonatorCooling => "resonator-cooling",
            ScenarioKind::AtomCooling => "atom-cooling",
            ScenarioKind::GammaScan => "gamma-scan",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| Error::UnknownScenario(name.to_string()))
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A validated run description.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    pub parameters: Table,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Worker threads for the ensemble; `None` uses the global pool. Never
    /// changes results.
    pub workers: Option<usize>,
}

const TOP_LEVEL_KEYS: [&str; 4] = ["scenario", "seed", "output", "parameters"];

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    if !path.is_file() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Parses and validates config text. Unknown keys are errors.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    if let Some(k) = table.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
        return Err(Error::UnknownKey(k.clone()));
    }
    let name = match table.get("scenario") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(Error::Config("`scenario` must be a string".into())),
        None => return Err(Error::MissingKey("scenario".into())),
    };
    let scenario = ScenarioKind::from_name(&name)?;
    let seed = match table.get("seed") {
        Some(Value::Integer(s)) if *s >= 0 => *s as u64,
        Some(_) => return Err(Error::Config("`seed` must be a non-negative integer".into())),
        None => return Err(Error::MissingKey("seed".into())),
    };
    let output = match table.get("output") {
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(_) => return Err(Error::Config("`output` must be a string".into())),
        None => None,
    };
    let parameters = match table.get("parameters") {
        Some(Value::Table(t)) => t.clone(),
        Some(_) => return Err(Error::Config("`parameters` must be a table".into())),
        None => Table::new(),
    };
    let cfg = RunConfig { scenario, parameters, seed, output, workers: None };
    super::scenarios::ScenarioParams::from_config(&cfg)?;
    Ok(cfg)
}

impl RunConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_workers(mut self, workers: Option<usize>) -> Self {
        self.workers = workers;
        self
    }

    /// Replaces every trajectory/trial count with `n`.
    pub fn with_trajectories(mut self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("trajectory count must be at least 1".into()));
        }
        override_counts(&mut self.parameters, n as i64);
        super::scenarios::ScenarioParams::from_config(&self)?;
        Ok(self)
    }

    /// Output directory: the configured one or `out/<scenario>`.
    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("out").join(self.scenario.name()))
    }
}

const COUNT_KEYS: [&str; 3] = ["trajectories", "trials", "hitting_trajectories"];

fn override_counts(t: &mut Table, n: i64) {
    for (k, v) in t.iter_mut() {
        match v {
            Value::Table(inner) => override_counts(inner, n),
            Value::Integer(x) if COUNT_KEYS.contains(&k.as_str()) => *x = n,
            Value::Array(a) if COUNT_KEYS.contains(&k.as_str()) => {
                for x in a.iter_mut() {
                    *x = Value::Integer(n);
                }
            }
            _ => {}
        }
    }
}

/// Typed access to a parameter table that remembers which keys were read.
pub(crate) struct Reader<'a> {
    table: &'a Table,
    prefix: String,
    used: RefCell<BTreeSet<String>>,
}

impl<'a> Reader<'a> {
    pub fn new(table: &'a Table, prefix: &str) -> Self {
        Self { table, prefix: prefix.to_string(), used: RefCell::new(BTreeSet::new()) }
    }

    fn path(&self, key: &str) -> String {
        format!("{}.{key}", self.prefix)
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.used.borrow_mut().insert(key.to_string());
        self.table.get(key)
    }

    fn type_error(&self, key: &str, what: &str) -> Error {
        Error::Config(format!("`{}` must be {what}", self.path(key)))
    }

    fn as_f64(&self, key: &str, v: &Value) -> Result<f64> {
        match v {
            Value::Float(x) => Ok(*x),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(self.type_error(key, "a number")),
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.get(key).ok_or_else(|| Error::MissingKey(self.path(key)))?;
        self.as_f64(key, v)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.get(key).map_or(Ok(default), |v| self.as_f64(key, v))
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key).map(|v| self.as_f64(key, v)).transpose()
    }

    fn as_usize(&self, key: &str, v: &Value) -> Result<usize> {
        match v {
            Value::Integer(i) if *i >= 0 => Ok(*i as usize),
            _ => Err(self.type_error(key, "a non-negative integer")),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key).ok_or_else(|| Error::MissingKey(self.path(key)))?;
        self.as_usize(key, v)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.get(key).map_or(Ok(default), |v| self.as_usize(key, v))
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key).map(|v| self.as_usize(key, v)).transpose()
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(_) => Err(self.type_error(key, "a boolean")),
        }
    }

    pub fn str_or(&self, key: &str, default: &str) -> Result<String> {
        match self.get(key) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(self.type_error(key, "a string")),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        match self.get(key) {
            None => Err(Error::MissingKey(self.path(key))),
            Some(Value::Array(a)) => a.iter().map(|v| self.as_f64(key, v)).collect(),
            Some(_) => Err(self.type_error(key, "an array of numbers")),
        }
    }

    pub fn opt_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        if self.table.contains_key(key) {
            self.f64_list(key).map(Some)
        } else {
            self.get(key);
            Ok(None)
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Err(Error::MissingKey(self.path(key))),
            Some(Value::Array(a)) => a.iter().map(|v| self.as_usize(key, v)).collect(),
            Some(_) => Err(self.type_error(key, "an array of integers")),
        }
    }

    pub fn opt_table(&self, key: &str) -> Result<Option<&'a Table>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(Some(t)),
            Some(_) => Err(self.type_error(key, "a table")),
        }
    }

    /// Errors on the first key that was never read.
    pub fn finish(self) -> Result<()> {
        let used = self.used.borrow();
        match self.table.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(Error::UnknownKey(self.path(k))),
            None => Ok(()),
        }
    }
}
