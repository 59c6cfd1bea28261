//! Plain-text experiment configs: `key = value` lines, `#` comments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::defect::Window;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Keys understood by the model itself.
pub const MODEL_KEYS: &[&str] = &["d", "n", "s", "lambda", "beta", "J", "potential", "seed"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    BoundSuite,
    ScalingGrid,
    McStudy,
    WedgeCheck,
    SmoothingScan,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::BoundSuite => "bound-suite",
            Experiment::ScalingGrid => "scaling-grid",
            Experiment::McStudy => "mc-study",
            Experiment::WedgeCheck => "wedge-check",
            Experiment::SmoothingScan => "smoothing-scan",
        }
    }

    /// Experiment-specific keys on top of [`MODEL_KEYS`].
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            Experiment::BoundSuite => &["pairs", "samples", "margin", "window"],
            Experiment::ScalingGrid => &["L_list", "a_rule"],
            Experiment::McStudy => &[
                "sites",
                "L",
                "a",
                "chains",
                "burn_in",
                "measure_every",
                "measurements",
                "t_fraction",
                "zeta",
                "lambda_over_c",
                "proposal",
                "step",
                "checkpoint_every",
            ],
            Experiment::WedgeCheck => &["dims", "radius"],
            Experiment::SmoothingScan => &["L", "a", "ell", "separations", "samples"],
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bound-suite" => Experiment::BoundSuite,
            "scaling-grid" => Experiment::ScalingGrid,
            "mc-study" => Experiment::McStudy,
            "wedge-check" => Experiment::WedgeCheck,
            "smoothing-scan" => Experiment::SmoothingScan,
            other => return Err(Error::Config(format!("unknown experiment '{other}'"))),
        })
    }
}

/// A parsed config for one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub values: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn parse(experiment: Experiment, text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, found '{line}'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "experiment" {
                if value != experiment.name() {
                    return Err(Error::Config(format!("config is for '{value}', not '{}'", experiment.name())));
                }
                continue;
            }
            if !MODEL_KEYS.contains(&key) && !experiment.keys().contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key '{key}' for {}", lineno + 1, experiment.name())));
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
        }
        Ok(ExperimentConfig { experiment, values })
    }

    pub fn from_file(experiment: Experiment, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(experiment, &text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            Some(v) => v.parse().map(Some).map_err(|_| Error::Config(format!("cannot parse {key} = {v}"))),
            None => Ok(None),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    /// Comma-separated list; an absent key gives `default`.
    pub fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Config(format!("cannot parse '{s}' in {key}"))))
                .collect(),
        }
    }

    /// `L:a` pairs, comma-separated.
    pub fn pairs(&self, key: &str, default: Vec<(u64, u64)>) -> Result<Vec<(u64, u64)>> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    let bad = || Error::Config(format!("cannot parse pair '{s}' in {key} (expected L:a)"));
                    let (l, a) = s.split_once(':').ok_or_else(bad)?;
                    Ok((l.trim().parse().map_err(|_| bad())?, a.trim().parse().map_err(|_| bad())?))
                })
                .collect(),
        }
    }

    pub fn model(&self) -> Result<ModelSpec> {
        ModelSpec::from_map(&self.values)
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_or("seed", 1)
    }

    /// `window = inf` or `window = box`, the latter meaning `Box(storage)`.
    pub fn window(&self, storage: u64, default: &str) -> Result<Window> {
        match self.values.get("window").map(String::as_str).unwrap_or(default) {
            "inf" => Ok(Window::Infinite),
            "box" => Ok(Window::Box(storage)),
            other => Err(Error::Config(format!("window must be inf or box, got '{other}'"))),
        }
    }

    /// `# key = value` provenance lines: the config keys in order, then the
    /// resolved model (defaults included) and seed.
    pub fn provenance(&self) -> Vec<(String, String)> {
        let mut out = vec![("experiment".to_string(), self.experiment.name().to_string()), ("version".to_string(), env!("CARGO_PKG_VERSION").to_string())];
        out.extend(self.values.iter().map(|(k, v)| (k.clone(), v.clone())));
        if let Ok(spec) = self.model() {
            for line in spec.to_config_string().lines() {
                if let Some((k, v)) = line.split_once('=') {
                    out.push((format!("model.{}", k.trim()), v.trim().to_string()));
                }
            }
        }
        if let Ok(seed) = self.seed() {
            out.push(("seed_used".to_string(), seed.to_string()));
        }
        out
    }
}
