//! The run configuration: one TOML document covering training, sampling
//! and benchmarking, with dotted-path overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::benchmark::{parse_grid, AblationRow, DEFAULT_SEEDS, DEFAULT_SUITE_SIZE};
use crate::sampler::SamplerConfig;
use crate::toymodel::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    /// Prompts in the generated default suite.
    pub suite_size: usize,
    pub suite_seed: u64,
    pub seeds: Vec<u64>,
    /// Ablation rows, `all` or e.g. `1,4,5`.
    pub grid: String,
    /// Largest tolerated fraction of failed runs.
    pub max_failure_rate: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            suite_size: DEFAULT_SUITE_SIZE,
            suite_seed: 0,
            seeds: DEFAULT_SEEDS.to_vec(),
            grid: "all".into(),
            max_failure_rate: 0.05,
        }
    }
}

impl BenchmarkConfig {
    pub fn rows(&self) -> Result<Vec<AblationRow>> {
        parse_grid(&self.grid)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub benchmark: BenchmarkConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampler.validate()?;
        self.benchmark.rows()?;
        if self.benchmark.seeds.is_empty() {
            return Err(Error::Config("benchmark.seeds must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.benchmark.max_failure_rate) {
            return Err(Error::Config("benchmark.max_failure_rate must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Applies `a.b.c=value`. The value is read as a TOML literal, falling
    /// back to a bare string. Unknown keys and ill-typed values are errors.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let path = path.trim();
        let value = parse_literal(raw.trim());
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
        }
        // Integers are accepted where floats are expected.
        *slot = match (&*slot, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}
