//! Experiment configuration file (TOML).
//!
//! ```toml
//! [topology]
//! racks = 2
//! nodes_per_rack = 4
//! devices_per_node = 8
//! # ... bandwidths (bytes/s) and latencies (s)
//!
//! [costs]
//! compute_time_per_sample = 9.2e-4
//! activation_bytes_per_sample = 7.5e5
//! gradient_bytes = 2.4e8
//! step_overhead = 0.019
//!
//! [[run]]
//! name = "Data Parallel"
//! scheme = "data"
//! global_batch = 256
//! target_throughput = 3400.0
//! strategy = { data_degree = 8 }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use parsim_core::collectives::Topology;
use parsim_core::simulator::{CostParams, FreeParam};
use parsim_core::strategies::{DelayPattern, StrategyConfig};
use parsim_core::trainer::EvalSettings;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<Topology>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<CostParams>,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default, rename = "run", skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<RunSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<TrainerSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub iterations: usize,
    pub timeline: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            iterations: 3,
            timeline: true,
        }
    }
}

/// One simulated configuration (a row of the report).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    /// Grouping label for the scalability table, e.g. `data` or `hybrid`.
    #[serde(default)]
    pub scheme: String,
    #[serde(default = "one")]
    pub nodes: usize,
    pub global_batch: usize,
    /// Observed throughput used as a calibration anchor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_throughput: Option<f64>,
    #[serde(default)]
    pub strategy: StrategyConfig,
}

fn one() -> usize {
    1
}

impl RunSpec {
    pub fn scheme(&self) -> &str {
        if self.scheme.is_empty() {
            &self.name
        } else {
            &self.scheme
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub free: Vec<FreeParam>,
    /// Largest acceptable |simulated / target - 1| after fitting.
    #[serde(default = "default_max_residual")]
    pub max_residual: f64,
}

fn default_max_residual() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        users: usize,
        items: usize,
        interactions: usize,
        /// Defaults to the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// `user_id,item_id,timestamp` CSV, relative to the config file.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub dataset: DatasetSpec,
    pub dim: usize,
    pub l2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Async staleness per worker, cycled.
    #[serde(default = "default_delays")]
    pub delays: Vec<usize>,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(rename = "variant")]
    pub variants: Vec<VariantSpec>,
}

fn default_log_every() -> usize {
    100
}

fn default_delays() -> Vec<usize> {
    DelayPattern::default().delays
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    #[serde(default)]
    pub strategy: StrategyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Md,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            formats: vec![Format::Csv, Format::Md],
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative dataset paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        if let Some(TrainerSection {
            dataset: DatasetSpec::Csv { path: data },
            ..
        }) = cfg.trainer.as_mut()
        {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: String, e: parsim_core::Error| CliError::Config(format!("{key}: {e}"));
        if let Some(t) = &self.topology {
            t.validate().map_err(|e| bad("topology".into(), e))?;
        }
        if let Some(c) = &self.costs {
            c.validate().map_err(|e| bad("costs".into(), e))?;
        }
        if self.simulation.iterations == 0 {
            return Err(CliError::Config("simulation.iterations must be >= 1".into()));
        }
        for (i, run) in self.runs.iter().enumerate() {
            let key = format!("run[{i}] ({})", run.name);
            run.strategy
                .validate()
                .map_err(|e| bad(format!("{key}.strategy"), e))?;
            if run.global_batch == 0 {
                return Err(CliError::Config(format!("{key}.global_batch must be >= 1")));
            }
            if run.nodes == 0 {
                return Err(CliError::Config(format!("{key}.nodes must be >= 1")));
            }
            if let Some(t) = run.target_throughput {
                if !(t.is_finite() && t > 0.0) {
                    return Err(CliError::Config(format!("{key}.target_throughput must be > 0")));
                }
            }
            if let Some(topo) = &self.topology {
                let need = run.strategy.devices();
                if need > topo.total_devices() {
                    return Err(CliError::Config(format!(
                        "{key}.strategy: data_degree * tensor_degree * pipeline_stages = {need} \
                         exceeds the {} devices in [topology]",
                        topo.total_devices()
                    )));
                }
            }
        }
        if let Some(cal) = &self.calibration {
            if cal.free.is_empty() {
                return Err(CliError::Config("calibration.free must list at least one parameter".into()));
            }
            if !(cal.max_residual.is_finite() && cal.max_residual >= 0.0) {
                return Err(CliError::Config("calibration.max_residual must be >= 0".into()));
            }
        }
        if let Some(tr) = &self.trainer {
            tr.validate()?;
        }
        Ok(())
    }
}

impl TrainerSection {
    fn validate(&self) -> Result<(), CliError> {
        let cfg = |m: String| Err(CliError::Config(m));
        if self.dim == 0 {
            return cfg("trainer.dim must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return cfg("trainer.learning_rate must be > 0".into());
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return cfg("trainer.l2 must be >= 0".into());
        }
        if self.batch_size == 0 {
            return cfg("trainer.batch_size must be >= 1".into());
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.split.iter().any(|r| *r < 0.0) {
            return cfg(format!("trainer.split {:?} must be non-negative and sum to 1", self.split));
        }
        if self.delays.is_empty() {
            return cfg("trainer.delays must not be empty".into());
        }
        if self.eval.k == 0 {
            return cfg("trainer.eval.k must be >= 1".into());
        }
        if let DatasetSpec::Synthetic { users, items, interactions, .. } = self.dataset {
            if users == 0 || items == 0 || interactions == 0 {
                return cfg("trainer.dataset counts must be >= 1".into());
            }
        }
        if self.variants.is_empty() {
            return cfg("trainer needs at least one [[trainer.variant]]".into());
        }
        for (i, v) in self.variants.iter().enumerate() {
            let key = format!("trainer.variant[{i}] ({})", v.name);
            v.strategy
                .validate()
                .map_err(|e| CliError::Config(format!("{key}.strategy: {e}")))?;
            let s = &v.strategy;
            if s.tensor_degree != 1 || s.pipeline_stages != 1 {
                return cfg(format!("{key}.strategy: training supports data parallelism only"));
            }
            if !self.batch_size.is_multiple_of(s.data_degree) {
                return cfg(format!(
                    "{key}.strategy.data_degree = {} does not divide trainer.batch_size = {}",
                    s.data_degree, self.batch_size
                ));
            }
        }
        Ok(())
    }
}
