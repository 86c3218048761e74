//! JSON experiment configuration. Parsing fills documented defaults, so a
//! parsed config is already fully resolved; serializing it back yields a
//! file that reloads to an identical config. Unknown keys are rejected
//! with their path.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{CompositeLossConfig, GroupDistillConfig};
use crate::federation::{LocalHyper, Strategy};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Schema { path: String, detail: String },
    #[error("config key `{key}`: {detail}")]
    Invalid { key: &'static str, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub federation: FederationSpec,
    pub strategy: StrategySpec,
    /// Few-sample threshold; the string "1/C" resolves to 1/num_classes.
    #[serde(default)]
    pub gamma: GammaSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Extra checkpoint every N rounds; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_interval: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![2022, 2023, 2024]
}

fn default_output_dir() -> String {
    "runs/experiment".into()
}

fn default_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticConfig),
    Idx(IdxConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_separation")]
    pub separation: Scalar,
    /// Seed for the data itself, shared by every experiment seed so runs
    /// compare on identical datasets.
    #[serde(default = "default_data_seed")]
    pub seed: u64,
}

fn default_n_classes() -> usize {
    10
}
fn default_train_per_class() -> usize {
    600
}
fn default_test_per_class() -> usize {
    100
}
fn default_feature_dim() -> usize {
    32
}
fn default_separation() -> Scalar {
    2.0
}
fn default_data_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Defaults to max label + 1 found in the files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// Keep only the first N training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    SmallMlp(SmallMlpConfig),
    SmallCnn(SmallCnnConfig),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::SmallMlp(SmallMlpConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmallMlpConfig {
    pub hidden_dim: usize,
    pub classifier_bias: bool,
}

impl Default for SmallMlpConfig {
    fn default() -> Self {
        SmallMlpConfig { hidden_dim: 64, classifier_bias: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmallCnnConfig {
    pub hidden_dim: usize,
    pub classifier_bias: bool,
}

impl Default for SmallCnnConfig {
    fn default() -> Self {
        SmallCnnConfig { hidden_dim: 64, classifier_bias: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSpec {
    pub alpha: Scalar,
    pub min_samples_per_client: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec { alpha: 0.1, min_samples_per_client: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSpec {
    pub n_clients: usize,
    pub sample_ratio: Scalar,
    pub rounds: usize,
    pub local: LocalHyperSpec,
}

impl Default for FederationSpec {
    fn default() -> Self {
        FederationSpec { n_clients: 100, sample_ratio: 0.1, rounds: 100, local: LocalHyperSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalHyperSpec {
    pub lr: Scalar,
    pub momentum: Scalar,
    pub weight_decay: Scalar,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LocalHyperSpec {
    fn default() -> Self {
        LocalHyperSpec { lr: 0.01, momentum: 0.9, weight_decay: 1e-5, epochs: 10, batch_size: 64 }
    }
}

impl LocalHyperSpec {
    pub fn to_hyper(&self) -> LocalHyper {
        LocalHyper {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategySpec {
    Fedavg(FedavgConfig),
    Fedprox(FedproxConfig),
    Feddistill(FeddistillConfig),
}

impl StrategySpec {
    pub fn to_strategy(&self) -> Strategy {
        match self {
            StrategySpec::Fedavg(_) => Strategy::FedAvg,
            StrategySpec::Fedprox(p) => Strategy::FedProx { mu: p.mu },
            StrategySpec::Feddistill(d) => Strategy::FedDistill { composite: d.to_composite() },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategySpec::Fedavg(_) => "fedavg",
            StrategySpec::Fedprox(_) => "fedprox",
            StrategySpec::Feddistill(_) => "feddistill",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FedavgConfig {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedproxConfig {
    pub mu: Scalar,
}

impl Default for FedproxConfig {
    fn default() -> Self {
        FedproxConfig { mu: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeddistillConfig {
    pub alpha_t: Scalar,
    pub alpha_r: Scalar,
    pub alpha_f: Scalar,
    pub temperature: Scalar,
    pub beta_l: Scalar,
    pub beta_e: Scalar,
    pub beta_fc: Scalar,
}

impl Default for FeddistillConfig {
    fn default() -> Self {
        let gd = GroupDistillConfig::default();
        let composite = CompositeLossConfig::default();
        FeddistillConfig {
            alpha_t: gd.alpha_t,
            alpha_r: gd.alpha_r,
            alpha_f: gd.alpha_f,
            temperature: gd.temperature,
            beta_l: composite.beta_l,
            beta_e: composite.beta_e,
            beta_fc: composite.beta_fc,
        }
    }
}

impl FeddistillConfig {
    pub fn to_composite(&self) -> CompositeLossConfig {
        CompositeLossConfig {
            beta_l: self.beta_l,
            beta_e: self.beta_e,
            beta_fc: self.beta_fc,
            gd: GroupDistillConfig {
                alpha_t: self.alpha_t,
                alpha_r: self.alpha_r,
                alpha_f: self.alpha_f,
                temperature: self.temperature,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSpec {
    Ratio(Scalar),
    Literal(String),
}

impl Default for GammaSpec {
    fn default() -> Self {
        GammaSpec::Literal("1/C".into())
    }
}

impl GammaSpec {
    pub fn resolve(&self, num_classes: usize) -> Scalar {
        match self {
            GammaSpec::Ratio(r) => *r,
            GammaSpec::Literal(_) => 1.0 / num_classes as Scalar,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &'static str, detail: String| Err(ConfigError::Invalid { key, detail });
        match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                if s.n_classes < 2 {
                    return bad("dataset.synthetic.n_classes", "need at least 2 classes".into());
                }
                if s.train_per_class == 0 || s.test_per_class == 0 || s.feature_dim == 0 {
                    return bad(
                        "dataset.synthetic",
                        "train_per_class, test_per_class, and feature_dim must be positive".into(),
                    );
                }
                if !(s.separation > 0.0) {
                    return bad("dataset.synthetic.separation", format!("must be positive, got {}", s.separation));
                }
            }
            DatasetSpec::Idx(_) => {}
        }
        match &self.model {
            ModelSpec::SmallMlp(m) if m.hidden_dim == 0 => {
                return bad("model.small_mlp.hidden_dim", "must be positive".into());
            }
            ModelSpec::SmallCnn(m) if m.hidden_dim == 0 => {
                return bad("model.small_cnn.hidden_dim", "must be positive".into());
            }
            _ => {}
        }
        if !(self.partition.alpha > 0.0) {
            return bad("partition.alpha", format!("must be positive, got {}", self.partition.alpha));
        }
        if self.federation.n_clients == 0 {
            return bad("federation.n_clients", "must be positive".into());
        }
        if !(self.federation.sample_ratio > 0.0 && self.federation.sample_ratio <= 1.0) {
            return bad(
                "federation.sample_ratio",
                format!("must be in (0, 1], got {}", self.federation.sample_ratio),
            );
        }
        let local = &self.federation.local;
        if !(local.lr > 0.0) {
            return bad("federation.local.lr", format!("must be positive, got {}", local.lr));
        }
        if !(0.0..1.0).contains(&local.momentum) {
            return bad(
                "federation.local.momentum",
                format!("must be in [0, 1), got {}", local.momentum),
            );
        }
        if local.weight_decay < 0.0 {
            return bad(
                "federation.local.weight_decay",
                format!("must be nonnegative, got {}", local.weight_decay),
            );
        }
        if local.batch_size == 0 {
            return bad("federation.local.batch_size", "must be positive".into());
        }
        if let StrategySpec::Fedprox(p) = &self.strategy {
            if p.mu < 0.0 {
                return bad("strategy.fedprox.mu", format!("must be nonnegative, got {}", p.mu));
            }
        }
        if let StrategySpec::Feddistill(d) = &self.strategy {
            if !(d.temperature > 0.0) {
                return bad(
                    "strategy.feddistill.temperature",
                    format!("must be positive, got {}", d.temperature),
                );
            }
            for (key, v) in [
                ("strategy.feddistill.alpha_t", d.alpha_t),
                ("strategy.feddistill.alpha_r", d.alpha_r),
                ("strategy.feddistill.alpha_f", d.alpha_f),
                ("strategy.feddistill.beta_l", d.beta_l),
                ("strategy.feddistill.beta_e", d.beta_e),
                ("strategy.feddistill.beta_fc", d.beta_fc),
            ] {
                if v < 0.0 {
                    return bad(key, format!("must be nonnegative, got {v}"));
                }
            }
        }
        match &self.gamma {
            GammaSpec::Ratio(r) => {
                if !(0.0..=1.0).contains(r) {
                    return bad("gamma", format!("must be in [0, 1], got {r}"));
                }
            }
            GammaSpec::Literal(s) => {
                if s != "1/C" {
                    return bad("gamma", format!("must be a number in [0, 1] or \"1/C\", got `{s}`"));
                }
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds", "need at least one seed".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds", "seeds must be distinct".into());
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size", "must be positive".into());
        }
        Ok(())
    }

    pub fn to_resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| ConfigError::Schema { path: origin.to_string(), detail: e.to_string() })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_config(&text, &path.display().to_string())
}
