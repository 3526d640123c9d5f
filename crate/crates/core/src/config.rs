//! Experiment configuration: a flat TOML file with `[system]`, `[training]`,
//! `[data]`, `[output]` and `[sweep]` tables, plus dotted `key=value`
//! overrides from the command line. Every key is optional; an empty file
//! gives the reference MNIST setup.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MODEL_DIM;
use crate::params::{Normalizer, SystemParams};
use crate::permute::PermutationKind;

/// Environment variable consulted when `data.dir` is not set.
pub const DATA_DIR_ENV: &str = "OTAFL_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

/// Phase-noise presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    None,
    Low,
    High,
}

impl Scenario {
    pub fn sigma_e2(self) -> f64 {
        match self {
            Scenario::None => 0.0,
            Scenario::Low => 0.0005,
            Scenario::High => 0.02,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::None => "none",
            Scenario::Low => "low",
            Scenario::High => "high",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Scenario::None),
            "low" => Ok(Scenario::Low),
            "high" => Ok(Scenario::High),
            other => Err(Error::Config(format!(
                "unknown scenario {other:?} (expected none | low | high)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawSystem {
    num_devices: usize,
    sigma_h2: f64,
    sigma_e2: Option<f64>,
    sigma_w2: f64,
    threshold: f64,
    power_limit: f64,
    normalizer: Normalizer,
}

impl Default for RawSystem {
    fn default() -> Self {
        let p = SystemParams::default();
        Self {
            num_devices: p.num_devices,
            sigma_h2: p.sigma_h2,
            sigma_e2: None,
            sigma_w2: p.sigma_w2,
            threshold: p.threshold,
            power_limit: p.power_limit,
            normalizer: p.normalizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub permutation: PermutationKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluate the test accuracy after every this many rounds.
    pub eval_every: usize,
    pub trials: usize,
    /// Sort-plan recomputations per epoch.
    pub sort_refresh: usize,
    pub shards_per_device: usize,
    /// Also write per-epoch mean |g_d| profiles.
    pub gradient_profile: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            permutation: PermutationKind::Identity,
            learning_rate: 0.01,
            batch_size: 5,
            epochs: 30,
            eval_every: 100,
            trials: 10,
            sort_refresh: 1,
            shards_per_device: 2,
            gradient_profile: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Keep only the first N training samples of each class.
    pub desk_per_class: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
            desk_per_class: None,
        }
    }
}

impl DataConfig {
    /// `data.dir`, else `$OTAFL_DATA_DIR`, else `data/mnist`.
    pub fn resolved_dir(&self) -> PathBuf {
        self.dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }

    fn join(&self, file: &Path) -> PathBuf {
        if file.is_absolute() {
            file.to_path_buf()
        } else {
            self.resolved_dir().join(file)
        }
    }

    pub fn train_paths(&self) -> (PathBuf, PathBuf) {
        (self.join(&self.train_images), self.join(&self.train_labels))
    }

    pub fn test_paths(&self) -> (PathBuf, PathBuf) {
        (self.join(&self.test_images), self.join(&self.test_labels))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub permutations: Vec<PermutationKind>,
    pub scenarios: Vec<Scenario>,
    /// Concurrent runs; 0 uses all cores.
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            permutations: PermutationKind::ALL.to_vec(),
            scenarios: vec![Scenario::Low, Scenario::High],
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    scenario: Option<Scenario>,
    system: RawSystem,
    training: TrainingConfig,
    data: DataConfig,
    output: OutputConfig,
    sweep: SweepConfig,
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    /// Preset that produced `system.sigma_e2`, when it was not set explicitly.
    pub scenario: Option<Scenario>,
    pub system: SystemParams,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        parse_config("").expect("empty config is valid")
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.system
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.training;
        let fail = |m: String| Err(Error::Config(m));
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return fail(format!(
                "training.learning_rate must be > 0, got {}",
                t.learning_rate
            ));
        }
        for (name, v) in [
            ("training.batch_size", t.batch_size),
            ("training.epochs", t.epochs),
            ("training.eval_every", t.eval_every),
            ("training.trials", t.trials),
            ("training.sort_refresh", t.sort_refresh),
            ("training.shards_per_device", t.shards_per_device),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if self.sweep.permutations.is_empty() || self.sweep.scenarios.is_empty() {
            return fail("sweep.permutations and sweep.scenarios must be non-empty".into());
        }
        Ok(())
    }

    /// Same settings under another phase-noise preset.
    pub fn with_scenario(&self, scenario: Scenario) -> Self {
        let mut c = self.clone();
        c.scenario = Some(scenario);
        c.system.sigma_e2 = scenario.sigma_e2();
        c
    }
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig> {
    let defaults = SystemParams::default();
    let scenario = match (raw.system.sigma_e2, raw.scenario) {
        (Some(_), s) => s,
        (None, s) => Some(s.unwrap_or(Scenario::Low)),
    };
    let sigma_e2 = raw
        .system
        .sigma_e2
        .unwrap_or_else(|| scenario.map_or(0.0, Scenario::sigma_e2));
    let cfg = ExperimentConfig {
        scenario,
        system: SystemParams {
            num_devices: raw.system.num_devices,
            model_dim: MODEL_DIM,
            sigma_h2: raw.system.sigma_h2,
            sigma_e2,
            sigma_w2: raw.system.sigma_w2,
            threshold: raw.system.threshold,
            power_limit: raw.system.power_limit,
            normalizer: raw.system.normalizer,
            base_seed: raw.seed.unwrap_or(defaults.base_seed),
        },
        training: raw.training,
        data: raw.data,
        output: raw.output,
        sweep: raw.sweep,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Parses config text. Unknown keys and type errors are reported with the
/// offending key and its line.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    resolve(raw)
}

fn parse_override_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Parses config text and then applies `key.path=value` overrides.
pub fn parse_config_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    // Checked on its own first so errors in the file keep their line numbers.
    parse_config(text)?;
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        let (last, parents) = path.split_last().expect("split yields one element");
        let mut node = &mut table;
        for part in parents {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry.as_table_mut().ok_or_else(|| {
                Error::Config(format!("override {key:?}: {part:?} is not a table"))
            })?;
        }
        node.insert(last.to_string(), parse_override_value(value.trim()));
    }
    let raw: RawConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("in overrides: {e}")))?;
    resolve(raw)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_with_overrides(&text, overrides)
}
