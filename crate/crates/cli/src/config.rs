//! Run configuration: defaults, then the JSON file given with `--config`,
//! then command-line flags. The resolved tree is echoed to `run.json` in
//! every output directory; passing that file back as `--config` reproduces
//! the run.

use std::collections::BTreeSet;
use std::path::Path;

use mbda_core::dki::FitConfig;
use mbda_core::io::{read_json, write_json};
use mbda_core::nn::{Pooling, TrainConfig};
use mbda_core::phantom::PhantomConfig;
use mbda_core::scenario::{MissingFill, Mode, ScenarioConfig, ScenarioKind};
use mbda_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSize {
    pub benign: usize,
    pub malignant: usize,
}

impl Default for DatasetSize {
    fn default() -> Self {
        DatasetSize { benign: 100, malignant: 121 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub alpha: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { alpha: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: Option<ScenarioKind>,
    pub modes: BTreeSet<Mode>,
    pub missing_fill: MissingFill,
    pub pooling: Pooling,
    pub split_seed: u64,
    /// Restrict a matrix run to these row indices of the enumeration.
    pub rows: Option<Vec<usize>>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            kind: None,
            modes: Mode::all(),
            missing_fill: MissingFill::Nearest,
            pooling: Pooling::Average,
            split_seed: 0,
            rows: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides the phantom, training and split seeds.
    pub seed: Option<u64>,
    pub phantom: PhantomConfig,
    pub dataset: DatasetSize,
    pub fit: FitConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub scenario: ScenarioSection,
}

impl RunConfig {
    /// Reads a config file or a previous `run.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = read_json(path)?;
        let inner = match value.get("config") {
            Some(c) if value.get("command").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(inner).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Propagate the global seed into every section.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.phantom.seed = seed;
            self.train.seed = seed;
            self.scenario.split_seed = seed;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.fit.validate()?;
        self.train.validate()?;
        self.scenario_config().validate()?;
        if self.scenario.modes.is_empty() {
            return Err(Error::InvalidConfig("scenario.modes must not be empty".into()));
        }
        Ok(())
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            fit: self.fit.clone(),
            train: self.train.clone(),
            pooling: self.scenario.pooling,
            missing_fill: self.scenario.missing_fill,
            alpha: self.eval.alpha,
            split_seed: self.scenario.split_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    /// Arguments after the program name.
    pub command: Vec<String>,
    pub config: RunConfig,
}

pub fn write_run_record(dir: &Path, command: &[String], config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let record = RunRecord {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.to_vec(),
        config: config.clone(),
    };
    write_json(&dir.join(RUN_RECORD), &record)
}
