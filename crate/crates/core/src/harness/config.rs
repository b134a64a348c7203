//! Flat `key = value` experiment configuration.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::fed::{AggregationPolicy, FederationConfig, NodeSpec, TrainConfig, TransportKind, Weighting};
use crate::nn::ModelConfig;
use crate::synthdata::{class_for_task, OrganSpec, PhantomConfig, LIVER, SPLEEN};
use crate::tensor::Activation;

/// The shipped desk-scale configuration.
pub const DESK_CONFIG: &str = include_str!("../../../../configs/desk.conf");

/// First sample id of the external test set.
pub const TEST_ID_BASE: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(key: &str, msg: impl Display) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

/// One data node: the task it annotates and how many volumes it holds.
#[derive(Clone, Debug, PartialEq)]
pub struct DataNode {
    pub task: String,
    pub volumes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub phantom: PhantomConfig,
    pub nodes: Vec<DataNode>,
    pub train_fraction: f64,
    pub test_size: usize,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub trainer: TrainConfig,
    pub baseline_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FedSection {
    pub rounds: u32,
    pub local_epochs: usize,
    pub policy: AggregationPolicy,
    pub transport: TransportKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub fed: FedSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let nodes = vec![
            DataNode {
                task: "liver".into(),
                volumes: 200,
            },
            DataNode {
                task: "spleen".into(),
                volumes: 60,
            },
        ];
        Self {
            experiment: "desk".into(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataSection {
                phantom: PhantomConfig::default(),
                nodes,
                train_fraction: 0.8,
                test_size: 30,
                cache_dir: None,
            },
            model: ModelConfig::default(),
            train: TrainSection {
                trainer: TrainConfig::default(),
                baseline_epochs: 80,
            },
            fed: FedSection {
                rounds: 40,
                local_epochs: 2,
                policy: AggregationPolicy::default(),
                transport: TransportKind::Inproc,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| invalid(key, format!("{v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(invalid(key, "expected two comma-separated numbers")),
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    fn organ_mut(&mut self, class_id: u8) -> &mut OrganSpec {
        self.data
            .phantom
            .organs
            .iter_mut()
            .find(|o| o.class_id == class_id)
            .expect("default phantom has both organs")
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "experiment" => {
                if v.is_empty() || v.contains(',') {
                    return Err(invalid(key, "must be non-empty and free of commas"));
                }
                self.experiment = v.to_string();
            }
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),

            "data.size" => self.data.phantom.size = parse_list(key, v)?,
            "data.background" => self.data.phantom.background = parse(key, v)?,
            "data.noise_sigma" => self.data.phantom.noise_sigma = parse(key, v)?,
            "data.liver_intensity" => self.organ_mut(LIVER).intensity = parse(key, v)?,
            "data.liver_axis_fraction" => self.organ_mut(LIVER).axis_fraction = parse_pair(key, v)?,
            "data.spleen_intensity" => self.organ_mut(SPLEEN).intensity = parse(key, v)?,
            "data.spleen_axis_fraction" => self.organ_mut(SPLEEN).axis_fraction = parse_pair(key, v)?,
            "data.margin" => self.data.phantom.margin = parse(key, v)?,
            "data.nodes" => {
                self.data.nodes = v
                    .split(',')
                    .map(|item| {
                        let (task, n) = item
                            .trim()
                            .split_once(':')
                            .ok_or_else(|| invalid(key, format!("{item:?} is not task:count")))?;
                        Ok(DataNode {
                            task: task.trim().to_string(),
                            volumes: parse(key, n.trim())?,
                        })
                    })
                    .collect::<Result<_>>()?
            }
            "data.train_fraction" => self.data.train_fraction = parse(key, v)?,
            "data.test_size" => self.data.test_size = parse(key, v)?,
            "data.cache_dir" => self.data.cache_dir = (!v.is_empty()).then(|| PathBuf::from(v)),

            "model.depth" => self.model.depth = parse(key, v)?,
            "model.channels" => self.model.channels = parse_list(key, v)?,
            "model.res_units" => self.model.num_res_units = parse(key, v)?,
            "model.activation" => {
                self.model.activation = match v {
                    "relu" => Activation::Relu,
                    "sigmoid" => Activation::Sigmoid,
                    _ => return Err(invalid(key, format!("expected relu or sigmoid, got {v:?}"))),
                }
            }
            "model.bn_eps" => self.model.bn_eps = parse(key, v)?,
            "model.bn_momentum" => self.model.bn_momentum = parse(key, v)?,

            "train.batch_size" => self.train.trainer.batch_size = parse(key, v)?,
            "train.base_lr" => self.train.trainer.base_lr = parse(key, v)?,
            "train.eta_min" => self.train.trainer.eta_min = parse(key, v)?,
            "train.patch_size" => self.train.trainer.patch_size = parse_list(key, v)?,
            "train.patches_per_sample" => self.train.trainer.patches_per_sample = parse(key, v)?,
            "train.pos_ratio" => self.train.trainer.pos_ratio = parse(key, v)?,
            "train.baseline_epochs" => self.train.baseline_epochs = parse(key, v)?,

            "fed.rounds" => self.fed.rounds = parse(key, v)?,
            "fed.local_epochs" => self.fed.local_epochs = parse(key, v)?,
            "fed.weighting" => self.fed.policy.weighting = parse::<Weighting>(key, v)?,
            "fed.aggregate_running_stats" => self.fed.policy.aggregate_running_stats = parse(key, v)?,
            "fed.transport" => self.fed.transport = parse::<TransportKind>(key, v)?,

            "eval.threshold" => self.train.trainer.threshold = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies `KEY=VAL` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: 0,
                msg: format!("override {o:?} is not KEY=VAL"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Shipped desk configuration.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.apply_text(DESK_CONFIG).expect("shipped config parses");
        c.sync();
        c
    }

    /// Derived fields that follow from others.
    fn sync(&mut self) {
        self.model.spatial_dims = self.data.phantom.size.len();
        self.model.tasks = self.data.nodes.iter().map(|n| n.task.clone()).collect();
        self.data.phantom.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data
            .phantom
            .validate()
            .map_err(|e| invalid("data.size", e))?;
        if self.data.nodes.is_empty() {
            return Err(invalid("data.nodes", "at least one node is required"));
        }
        for (i, n) in self.data.nodes.iter().enumerate() {
            if class_for_task(&n.task).is_none() {
                return Err(invalid("data.nodes", format!("unknown task {:?} (liver or spleen)", n.task)));
            }
            if self.data.nodes[..i].iter().any(|m| m.task == n.task) {
                return Err(invalid("data.nodes", format!("task {:?} listed twice", n.task)));
            }
            if self.train_count(i) == 0 {
                return Err(invalid("data.nodes", format!("node {:?} has no training volumes", n.task)));
            }
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(invalid("data.train_fraction", "must lie in (0, 1]"));
        }
        if self.data.test_size == 0 {
            return Err(invalid("data.test_size", "must be positive"));
        }
        self.model.validate().map_err(|e| invalid("model.channels", e))?;
        let factor = self.model.size_factor();
        let size = &self.data.phantom.size;
        if size.iter().any(|s| s % factor != 0) {
            return Err(invalid("data.size", format!("every axis must be divisible by {factor}")));
        }
        let patch = &self.train.trainer.patch_size;
        if patch.len() != size.len() || patch.iter().zip(size).any(|(p, s)| p > s || p % factor != 0) {
            return Err(invalid(
                "train.patch_size",
                format!("needs {} axes, each ≤ data.size and divisible by {factor}", size.len()),
            ));
        }
        self.train.trainer.validate().map_err(|e| invalid("train", e))?;
        if !(self.train.trainer.base_lr > 0.0) {
            return Err(invalid("train.base_lr", "must be positive"));
        }
        if self.fed.rounds == 0 {
            return Err(invalid("fed.rounds", "must be at least 1"));
        }
        if self.fed.local_epochs == 0 {
            return Err(invalid("fed.local_epochs", "must be at least 1"));
        }
        Ok(())
    }

    /// Training-split size of node `i`.
    pub fn train_count(&self, i: usize) -> usize {
        (self.data.nodes[i].volumes as f64 * self.data.train_fraction + 1e-9).floor() as usize
    }

    /// Sample ids of node `i`: nodes take consecutive ranges in listed order.
    pub fn node_ids(&self, i: usize) -> std::ops::Range<u64> {
        let start: usize = self.data.nodes[..i].iter().map(|n| n.volumes).sum();
        start as u64..(start + self.data.nodes[i].volumes) as u64
    }

    pub fn test_ids(&self) -> std::ops::Range<u64> {
        TEST_ID_BASE..TEST_ID_BASE + self.data.test_size as u64
    }

    pub fn node_specs(&self) -> Vec<NodeSpec> {
        self.data
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeSpec {
                node_id: i as u16,
                task: n.task.clone(),
                sample_count: self.train_count(i) as u64,
            })
            .collect()
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            rounds: self.fed.rounds,
            local_epochs: self.fed.local_epochs,
            nodes: self.node_specs(),
            policy: self.fed.policy,
            transport: self.fed.transport,
            seed: self.seed,
        }
    }

    /// Canonical text form; parsing it reproduces this config.
    pub fn to_text(&self) -> String {
        let p = &self.data.phantom;
        let organ = |c: u8| p.organs.iter().find(|o| o.class_id == c).expect("organ");
        let (l, s) = (organ(LIVER), organ(SPLEEN));
        let t = &self.train.trainer;
        let act = match self.model.activation {
            Activation::Sigmoid => "sigmoid",
            _ => "relu",
        };
        let nodes: Vec<String> = self.data.nodes.iter().map(|n| format!("{}:{}", n.task, n.volumes)).collect();
        let lines = [
            format!("experiment = {}", self.experiment),
            format!("seed = {}", self.seed),
            format!("output_dir = {}", self.output_dir.display()),
            format!("data.size = {}", join(&p.size)),
            format!("data.background = {}", p.background),
            format!("data.noise_sigma = {}", p.noise_sigma),
            format!("data.liver_intensity = {}", l.intensity),
            format!("data.liver_axis_fraction = {},{}", l.axis_fraction.0, l.axis_fraction.1),
            format!("data.spleen_intensity = {}", s.intensity),
            format!("data.spleen_axis_fraction = {},{}", s.axis_fraction.0, s.axis_fraction.1),
            format!("data.margin = {}", p.margin),
            format!("data.nodes = {}", nodes.join(",")),
            format!("data.train_fraction = {}", self.data.train_fraction),
            format!("data.test_size = {}", self.data.test_size),
            format!(
                "data.cache_dir = {}",
                self.data.cache_dir.as_deref().map(|d| d.display().to_string()).unwrap_or_default()
            ),
            format!("model.depth = {}", self.model.depth),
            format!("model.channels = {}", join(&self.model.channels)),
            format!("model.res_units = {}", self.model.num_res_units),
            format!("model.activation = {act}"),
            format!("model.bn_eps = {}", self.model.bn_eps),
            format!("model.bn_momentum = {}", self.model.bn_momentum),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.base_lr = {}", t.base_lr),
            format!("train.eta_min = {}", t.eta_min),
            format!("train.patch_size = {}", join(&t.patch_size)),
            format!("train.patches_per_sample = {}", t.patches_per_sample),
            format!("train.pos_ratio = {}", t.pos_ratio),
            format!("train.baseline_epochs = {}", self.train.baseline_epochs),
            format!("fed.rounds = {}", self.fed.rounds),
            format!("fed.local_epochs = {}", self.fed.local_epochs),
            format!("fed.weighting = {}", self.fed.policy.weighting),
            format!("fed.aggregate_running_stats = {}", self.fed.policy.aggregate_running_stats),
            format!("fed.transport = {}", self.fed.transport),
            format!("eval.threshold = {}", t.threshold),
        ];
        lines.join("\n") + "\n"
    }
}

/// Parses `text` on top of the defaults, applies `overrides` last and
/// validates.
pub fn parse_config<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    c.apply_text(text)?;
    c.apply_overrides(overrides)?;
    c.sync();
    c.validate()?;
    Ok(c)
}

/// Reads a config file, or the shipped desk config when `path` is `None`.
pub fn load_config<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.to_path_buf(),
            source,
        })?,
        None => DESK_CONFIG.to_string(),
    };
    parse_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_is_the_default() {
        let desk = load_config::<&str>(None, &[]).unwrap();
        let mut def = ExperimentConfig::default();
        def.sync();
        assert_eq!(desk, def);
        assert_eq!(desk, ExperimentConfig::desk());
    }

    #[test]
    fn overrides_apply_last() {
        let c = parse_config(DESK_CONFIG, &["train.batch_size=4", "seed = 9"]).unwrap();
        assert_eq!(c.train.trainer.batch_size, 4);
        assert_eq!(c.seed, 9);
        assert_eq!(c.data.phantom.seed, 9);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(DESK_CONFIG, &["foo.bar=1"]).unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "foo.bar"));
        assert!(err.to_string().contains("foo.bar"));
    }

    #[test]
    fn errors_carry_line_and_key() {
        let err = parse_config::<&str>("seed = 1\nnot a pair\n", &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }));
        let err = parse_config(DESK_CONFIG, &["fed.rounds=0"]).unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "fed.rounds"));
        let err = parse_config(DESK_CONFIG, &["train.patch_size=30,30"]).unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "train.patch_size"));
        let err = parse_config(DESK_CONFIG, &["fed.transport=udp"]).unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "fed.transport"));
    }

    #[test]
    fn text_round_trip() {
        let c = parse_config(DESK_CONFIG, &["data.cache_dir=/tmp/x", "fed.weighting=uniform"]).unwrap();
        assert_eq!(parse_config::<&str>(&c.to_text(), &[]).unwrap(), c);
    }

    #[test]
    fn node_layout() {
        let c = ExperimentConfig::desk();
        assert_eq!(c.node_ids(0), 0..200);
        assert_eq!(c.node_ids(1), 200..260);
        let specs = c.node_specs();
        assert_eq!((specs[0].sample_count, specs[1].sample_count), (160, 48));
        assert_eq!(c.test_ids().count(), 30);
        assert_eq!(c.federation().total_local_epochs(), 80);
    }
}
