//! Run configuration: one flat JSON object with dotted keys.
//!
//! Values are layered as defaults < config file < command-line flags.

use std::path::{Path, PathBuf};

use cds::encodings::{Encoding, RangeSpec};
use cds::models::{ModelConfig, ModelKind};
use cds::training::{Algo, OptimConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Settings of the desk-scale CIFAR-10 protocol run (`--preset full-protocol`).
pub const FULL_PROTOCOL: &str = include_str!("../configs/full_protocol.json");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("config key '{key}': {message}")]
    Type { key: String, message: String },
    #[error("config file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("unknown preset '{0}' (expected full-protocol)")]
    Preset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub precision: Precision,

    #[serde(rename = "model.name")]
    pub model: ModelKind,
    #[serde(rename = "model.division_eps")]
    pub division_eps: f64,

    #[serde(rename = "data.name")]
    pub data: DataSource,
    /// Dataset root; falls back to `CDS_DATA_DIR`.
    #[serde(rename = "data.root")]
    pub data_root: Option<PathBuf>,
    /// Use only the first `n` training items.
    #[serde(rename = "data.subset")]
    pub subset: Option<usize>,
    /// Defaults to `sliding` for CIFAR and `native` for synthetic data.
    #[serde(rename = "data.encoding")]
    pub encoding: Option<Encoding>,
    #[serde(rename = "data.seed")]
    pub data_seed: u64,
    #[serde(rename = "data.classes")]
    pub classes: usize,
    #[serde(rename = "data.per_class")]
    pub per_class: usize,
    #[serde(rename = "data.size")]
    pub size: usize,
    #[serde(rename = "data.noise")]
    pub noise: f64,

    #[serde(rename = "optim.algo")]
    pub algo: Algo,
    #[serde(rename = "optim.lr")]
    pub lr: f64,
    #[serde(rename = "optim.beta1")]
    pub beta1: f64,
    #[serde(rename = "optim.beta2")]
    pub beta2: f64,
    #[serde(rename = "optim.eps")]
    pub eps: f64,
    #[serde(rename = "optim.weight_decay")]
    pub weight_decay: f64,
    #[serde(rename = "optim.momentum")]
    pub momentum: f64,

    #[serde(rename = "train.steps")]
    pub steps: usize,
    #[serde(rename = "train.batch_size")]
    pub batch_size: usize,
    #[serde(rename = "train.validate_every")]
    pub validate_every: usize,
    /// Random complex scaling of training images; off when unset.
    #[serde(rename = "augment.theta_max")]
    pub augment_theta_max: Option<f64>,
    #[serde(rename = "augment.log_mag_min")]
    pub augment_log_mag_min: f64,
    #[serde(rename = "augment.log_mag_max")]
    pub augment_log_mag_max: f64,

    #[serde(rename = "eval.checkpoint")]
    pub checkpoint: Option<PathBuf>,
    #[serde(rename = "eval.batch_size")]
    pub eval_batch_size: usize,
    #[serde(rename = "eval.split")]
    pub eval_split: EvalSplit,

    #[serde(rename = "robustness.draws")]
    pub draws: usize,
    #[serde(rename = "robustness.theta_max")]
    pub theta_max: Vec<f64>,

    #[serde(rename = "biasvar.replicas")]
    pub replicas: usize,
    #[serde(rename = "biasvar.checkpoints")]
    pub replica_checkpoints: Vec<PathBuf>,

    #[serde(rename = "gradcheck.all")]
    pub gradcheck_all: bool,
    #[serde(rename = "gradcheck.layers")]
    pub gradcheck_layers: Vec<String>,
    #[serde(rename = "gradcheck.seeds")]
    pub gradcheck_seeds: usize,
    #[serde(rename = "gradcheck.tolerance")]
    pub gradcheck_tolerance: f64,

    #[serde(rename = "encode.input")]
    pub encode_input: Option<PathBuf>,
    #[serde(rename = "encode.scale_mag")]
    pub scale_mag: f64,
    #[serde(rename = "encode.scale_phase")]
    pub scale_phase: f64,

    #[serde(rename = "wfmcheck.trials")]
    pub wfm_trials: usize,

    #[serde(rename = "table.models")]
    pub table_models: Vec<ModelKind>,
}

impl RunConfig {
    pub fn defaults(command: &str) -> Self {
        let optim = OptimConfig::default();
        let train = TrainConfig::default();
        use std::f64::consts::PI;
        Self {
            command: command.to_string(),
            seed: 0,
            out: None,
            precision: Precision::Fp32,
            model: ModelKind::TypeI,
            division_eps: 1e-7,
            data: DataSource::Synth,
            data_root: None,
            subset: None,
            encoding: None,
            data_seed: 0,
            classes: 10,
            per_class: 500,
            size: 32,
            noise: 0.1,
            algo: optim.algo,
            lr: optim.lr,
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: optim.eps,
            weight_decay: optim.weight_decay,
            momentum: optim.momentum,
            steps: train.steps,
            batch_size: train.batch_size,
            validate_every: train.validate_every,
            augment_theta_max: None,
            augment_log_mag_min: 0.0,
            augment_log_mag_max: 0.0,
            checkpoint: None,
            eval_batch_size: 256,
            eval_split: EvalSplit::Test,
            draws: 5,
            theta_max: vec![0.0, PI / 8.0, PI / 4.0, PI / 2.0, PI],
            replicas: 5,
            replica_checkpoints: Vec::new(),
            gradcheck_all: false,
            gradcheck_layers: Vec::new(),
            gradcheck_seeds: 1,
            gradcheck_tolerance: 1e-4,
            encode_input: None,
            scale_mag: 1.0,
            scale_phase: 0.0,
            wfm_trials: 100,
            table_models: vec![ModelKind::TypeI, ModelKind::TypeE, ModelKind::Dcn, ModelKind::Real],
        }
    }

    pub fn optimizer(&self) -> OptimConfig {
        OptimConfig {
            algo: self.algo,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            validate_every: self.validate_every,
            optimizer: self.optimizer(),
            seed,
            augment: self.augment_theta_max.map(|theta_max| RangeSpec {
                theta_max,
                log_mag_min: self.augment_log_mag_min,
                log_mag_max: self.augment_log_mag_max,
            }),
        }
    }

    pub fn model_config(&self, kind: ModelKind, num_classes: usize, in_channels: usize, image_size: usize, seed: u64) -> ModelConfig {
        ModelConfig::new(kind, num_classes, in_channels).image_size(image_size).seed(seed).division_eps(self.division_eps)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run configs serialize")
    }
}

fn as_object(v: Value, path: &Path) -> Result<Map<String, Value>, ConfigError> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(ConfigError::File { path: path.to_path_buf(), message: "expected a JSON object".into() }),
    }
}

/// Reads a config file. An empty file counts as `{}`.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::File { path: path.to_path_buf(), message: e.to_string() })?;
    if text.trim().is_empty() {
        return Ok(Map::new());
    }
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError::File { path: path.to_path_buf(), message: e.to_string() })?;
    as_object(v, path)
}

pub fn preset(name: &str) -> Result<Map<String, Value>, ConfigError> {
    match name {
        "full-protocol" | "full_protocol" => {
            let v: Value = serde_json::from_str(FULL_PROTOCOL).expect("bundled preset is valid JSON");
            as_object(v, Path::new("configs/full_protocol.json"))
        }
        other => Err(ConfigError::Preset(other.to_string())),
    }
}

/// Layers `sources` (lowest precedence first) over the defaults for
/// `command`. The command itself always comes from the invocation.
pub fn resolve(command: &str, sources: &[Map<String, Value>]) -> Result<RunConfig, ConfigError> {
    let Value::Object(mut base) = serde_json::to_value(RunConfig::defaults(command)).expect("defaults serialize") else {
        unreachable!("run configs serialize to objects")
    };
    let mut unknown: Vec<String> = sources.iter().flat_map(|s| s.keys()).filter(|k| !base.contains_key(*k)).cloned().collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(ConfigError::UnknownKeys(unknown));
    }
    let defaults = base.clone();
    for source in sources {
        for (k, v) in source {
            if k != "command" {
                base.insert(k.clone(), v.clone());
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| {
        // Name the first key whose value alone fails to deserialize.
        for source in sources.iter().rev() {
            for (k, v) in source {
                let mut probe = defaults.clone();
                probe.insert(k.clone(), v.clone());
                if let Err(err) = serde_json::from_value::<RunConfig>(Value::Object(probe)) {
                    return ConfigError::Type { key: k.clone(), message: err.to_string() };
                }
            }
        }
        ConfigError::Type { key: "?".into(), message: e.to_string() }
    })
}

/// Parses a `--set key=value` override; the value is JSON when it parses
/// as JSON, a string otherwise.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let file = obj(json!({"train.steps": 10, "seed": 3}));
        let flags = obj(json!({"train.steps": 20}));
        let c = resolve("train", &[file.clone(), flags]).unwrap();
        assert_eq!((c.steps, c.seed), (20, 3));
        let c = resolve("train", &[file]).unwrap();
        assert_eq!(c.steps, 10);
        let c = resolve("train", &[Map::new(), obj(json!({"model.name": "dcn", "train.steps": 7}))]).unwrap();
        assert_eq!((c.model, c.steps), (ModelKind::Dcn, 7));
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = resolve("train", &[obj(json!({"train.stepz": 1, "bogus": 2, "seed": 1}))]).unwrap_err();
        match err {
            ConfigError::UnknownKeys(keys) => assert_eq!(keys, vec!["bogus".to_string(), "train.stepz".to_string()]),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = resolve("train", &[obj(json!({"seed": 1, "train.steps": "many"}))]).unwrap_err();
        match err {
            ConfigError::Type { key, .. } => assert_eq!(key, "train.steps"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn effective_config_round_trips() {
        let c = resolve("eval", &[obj(json!({"data.encoding": "lab", "augment.theta_max": 1.0}))]).unwrap();
        let back: Map<String, Value> = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(resolve("eval", &[back]).unwrap(), c);
    }

    #[test]
    fn full_protocol_mirrors_reference_settings() {
        let c = resolve("train", &[preset("full-protocol").unwrap()]).unwrap();
        assert_eq!(c.model, ModelKind::TypeI);
        assert_eq!(c.data, DataSource::Cifar10);
        assert_eq!(c.encoding, Some(Encoding::Lab));
        assert_eq!(c.subset, None);
        assert_eq!(c.optimizer(), OptimConfig { algo: Algo::Adamw, lr: 1e-3, beta1: 0.99, beta2: 0.999, eps: 1e-8, weight_decay: 0.1, momentum: 0.0 });
        assert_eq!((c.steps, c.batch_size, c.validate_every), (50_000, 256, 1000));
        assert_eq!(c.augment_theta_max, None);
    }

    #[test]
    fn assignments_parse_json_or_strings() {
        assert_eq!(parse_assignment("train.steps=5").unwrap(), ("train.steps".into(), json!(5)));
        assert_eq!(parse_assignment("model.name=dcn").unwrap(), ("model.name".into(), json!("dcn")));
        assert!(parse_assignment("nokey").is_err());
    }
}
