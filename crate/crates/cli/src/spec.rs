//! Run configuration files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context as _;
use onebt::data::{Level, NormPolicy, Task};
use onebt::metrics::{Averaging, MetricOptions, StdKind};
use onebt::train::TrainConfig;
use onebt::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Which task subsets to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TaskSel {
    /// The three tasks separately, as in the results tables.
    #[default]
    All,
    /// All tasks in one pool.
    Pooled,
    One(Task),
}

impl TaskSel {
    pub fn tasks(self) -> Vec<Option<Task>> {
        match self {
            TaskSel::All => Task::ALL.iter().map(|&t| Some(t)).collect(),
            TaskSel::Pooled => vec![None],
            TaskSel::One(t) => vec![Some(t)],
        }
    }

    /// Filter applied by commands that train a single model.
    pub fn single(self) -> Option<Task> {
        match self {
            TaskSel::One(t) => Some(t),
            _ => None,
        }
    }
}

impl FromStr for TaskSel {
    type Err = onebt::Error;
    fn from_str(s: &str) -> onebt::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(TaskSel::All),
            "pooled" => Ok(TaskSel::Pooled),
            _ => s.parse().map(TaskSel::One).map_err(|_| {
                onebt::Error::Config(format!("unknown task `{s}` (IQ, MATH, GAME, all, pooled)"))
            }),
        }
    }
}

impl fmt::Display for TaskSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSel::All => f.write_str("all"),
            TaskSel::Pooled => f.write_str("pooled"),
            TaskSel::One(t) => write!(f, "{t}"),
        }
    }
}

impl Serialize for TaskSel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskSel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub norm: NormPolicy,
    pub positive: Level,
    pub averaging: Averaging,
    pub std: StdKind,
    pub jobs: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            norm: NormPolicy::default(),
            positive: Level::Hard,
            averaging: Averaging::Binary,
            std: StdKind::Population,
            jobs: 1,
        }
    }
}

impl EvalSpec {
    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            positive: self.positive,
            averaging: self.averaging,
        }
    }
}

/// Everything needed to reproduce a run. Command-line flags override the
/// matching keys; the resolved spec is written next to the outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub task: TaskSel,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSpec,
}

impl RunSpec {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let spec: RunSpec = toml::from_str(text)?;
        spec.model.validate()?;
        spec.train.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
