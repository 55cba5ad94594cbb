//! Run configuration: a TOML file with one table per pipeline stage.
//!
//! ```toml
//! [data]
//! generator = "regression"
//! count = 2000
//!
//! [partition]
//! gamma = 0.3
//!
//! [train]
//! m = 50
//! n1 = 40
//! eta = "1/L"
//!
//! [run]
//! seeds = [0, 1, 2]
//! out = "out/benchmark"
//! ```
//!
//! Every key is optional; missing keys take the defaults below, unknown
//! keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use typsgd_core::{BandwidthRule, ModelKind, TsneConfig};

use crate::error::{usage, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// Piecewise-linear curves.
    Pwl,
    /// Gaussian mixture; targets are component indices.
    Clustered,
    /// Linear regression on a Gaussian mixture, one spread and noise level
    /// per component.
    Regression,
    /// Import `data.path`.
    Csv,
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::Pwl => "pwl",
            Generator::Clustered => "clustered",
            Generator::Regression => "regression",
            Generator::Csv => "csv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub generator: Generator,
    pub count: usize,
    /// Defaults to the first run seed.
    pub seed: Option<u64>,
    pub curve_length: usize,
    pub segments: usize,
    /// Mixture components, one row per component.
    pub centers: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub label_noise: Vec<f64>,
    pub true_weights: Vec<f64>,
    pub decorrelate_noise: bool,
    pub path: Option<PathBuf>,
    pub has_header: bool,
    pub target_columns: Vec<usize>,
    /// Fraction of rows moved to `validation.csv`.
    pub holdout: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: Generator::Regression,
            count: 2000,
            seed: None,
            curve_length: 64,
            segments: 3,
            centers: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            weights: vec![0.9, 0.1],
            sigmas: vec![1.0, 12.0],
            label_noise: vec![0.0, 10.0],
            true_weights: vec![1.0, -1.0, 0.5],
            decorrelate_noise: true,
            path: None,
            has_header: true,
            target_columns: Vec::new(),
            holdout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub seed: Option<u64>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        let t = TsneConfig::default();
        Self {
            perplexity: t.perplexity,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            early_exaggeration: t.early_exaggeration,
            exaggeration_iterations: t.exaggeration_iterations,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub gamma: f64,
    pub bandwidth: BandwidthRule,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            bandwidth: BandwidthRule::Scott,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum N1Rule {
    /// `round(0.8 m)`.
    Default,
    /// `round(m N1 / N)`, clamped to `[1, m - 1]`.
    Proportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum N1Policy {
    Count(usize),
    Rule(N1Rule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EtaRule {
    #[serde(rename = "1/L")]
    InverseLipschitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Eta {
    Value(f64),
    Rule(EtaRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Srs,
    Typicality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub model: ModelKind,
    /// Hidden width of the `mlp` model.
    pub hidden: usize,
    pub m: usize,
    pub n1: N1Policy,
    /// SGD step size.
    pub eta: Eta,
    pub adam_lr: f64,
    pub iterations: usize,
    /// Suboptimality (or training loss, for models without a known
    /// optimum) counted as converged.
    pub threshold: f64,
    pub eval_every: usize,
    pub samplers: Vec<SamplerKind>,
    pub optimizers: Vec<OptimizerKind>,
    /// Record the closed-form error ratio at every evaluation.
    pub alpha: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            model: ModelKind::Quadratic,
            hidden: typsgd_core::models::DEFAULT_HIDDEN_WIDTH,
            m: 50,
            n1: N1Policy::Rule(N1Rule::Default),
            eta: Eta::Rule(EtaRule::InverseLipschitz),
            adam_lr: 0.05,
            iterations: 6000,
            threshold: 1e-3,
            eval_every: 1,
            samplers: vec![SamplerKind::Srs, SamplerKind::Typicality],
            optimizers: vec![OptimizerKind::Sgd, OptimizerKind::Adam],
            alpha: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random instances per formula check.
    pub instances: usize,
    pub seed: Option<u64>,
    /// Test hook: perturb the SRS closed form so its check fails.
    pub inject_fault: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            seed: None,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub workers: usize,
    /// Create `out` when it does not exist.
    pub create_out: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out: PathBuf::from("out"),
            workers: 1,
            create_out: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub embedding: EmbeddingConfig,
    pub partition: PartitionConfig,
    pub train: TrainSection,
    pub verify: VerifyConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("bad config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(format!("in {}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialise")
    }

    /// Command-line overrides: `--seed` replaces the seed list, `--out`
    /// and `--workers` replace their keys.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>, workers: Option<usize>) {
        if let Some(s) = seed {
            self.run.seeds = vec![s];
        }
        if let Some(o) = out {
            self.run.out = o;
        }
        if let Some(w) = workers {
            self.run.workers = w;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.run.seeds.is_empty() {
            return usage("run.seeds must list at least one seed");
        }
        if self.run.workers == 0 {
            return usage("run.workers must be positive");
        }
        let gamma = self.partition.gamma;
        if !(gamma > 0.0 && gamma < 0.8) {
            return Err(CliError::Core(typsgd_core::Error::InvalidArgument(format!(
                "partition.gamma = {gamma} outside (0, 0.8)"
            ))));
        }
        let t = &self.train;
        if t.m == 0 || t.iterations == 0 || t.eval_every == 0 {
            return usage("train.m, train.iterations and train.eval_every must be positive");
        }
        if !(t.threshold > 0.0) {
            return usage("train.threshold must be positive");
        }
        if t.samplers.is_empty() || t.optimizers.is_empty() {
            return usage("train.samplers and train.optimizers must be non-empty");
        }
        if let Eta::Value(v) = t.eta {
            if !(v > 0.0 && v.is_finite()) {
                return usage(format!("train.eta = {v} must be a positive number or \"1/L\""));
            }
        }
        if !(t.adam_lr > 0.0) {
            return usage("train.adam_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.data.holdout) {
            return usage("data.holdout must be in [0, 1)");
        }
        if self.data.generator == Generator::Csv && self.data.path.is_none() {
            return usage("data.generator = \"csv\" needs data.path");
        }
        if self.verify.instances == 0 {
            return usage("verify.instances must be positive");
        }
        Ok(())
    }

    /// SHA-256 prefix of the configuration, ignoring where outputs go and
    /// how many workers produce them.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.run.out = PathBuf::new();
        canonical.run.workers = 0;
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn base_seed(&self) -> u64 {
        self.run.seeds[0]
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.base_seed())
    }

    pub fn embedding_seed(&self) -> u64 {
        self.embedding.seed.unwrap_or(self.base_seed())
    }

    pub fn verify_seed(&self) -> u64 {
        self.verify.seed.unwrap_or(self.base_seed())
    }

    pub fn tsne(&self) -> TsneConfig {
        let e = &self.embedding;
        TsneConfig {
            perplexity: e.perplexity,
            iterations: e.iterations,
            learning_rate: e.learning_rate,
            early_exaggeration: e.early_exaggeration,
            exaggeration_iterations: e.exaggeration_iterations,
            seed: self.embedding_seed(),
            ..TsneConfig::default()
        }
    }

    /// First line of every output file.
    pub fn header(&self, seed: u64) -> String {
        format!(
            "typsgd version={} config_hash={} seed={seed}",
            typsgd_core::VERSION,
            self.hash()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn policies_parse_from_numbers_and_names() {
        let c = RunConfig::from_toml("[train]\nn1 = 7\neta = 0.5\n").unwrap();
        assert_eq!(c.train.n1, N1Policy::Count(7));
        assert_eq!(c.train.eta, Eta::Value(0.5));
        let c = RunConfig::from_toml("[train]\nn1 = \"proportional\"\neta = \"1/L\"\n").unwrap();
        assert_eq!(c.train.n1, N1Policy::Rule(N1Rule::Proportional));
        assert_eq!(c.train.eta, Eta::Rule(EtaRule::InverseLipschitz));
        let c = RunConfig::from_toml("[partition]\nbandwidth = { fixed = 0.5 }\n").unwrap();
        assert_eq!(c.partition.bandwidth, BandwidthRule::Fixed(0.5));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let err = RunConfig::from_toml("[train]\nbatch = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), crate::error::EXIT_USAGE);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.apply_overrides(None, Some("elsewhere".into()), Some(4));
        assert_eq!(a.hash(), b.hash());
        b.apply_overrides(Some(9), None, None);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn gamma_outside_range_is_invalid_argument() {
        let c = RunConfig::from_toml("[partition]\ngamma = 0.9\n").unwrap();
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("gamma"));
        assert_eq!(err.exit_code(), crate::error::EXIT_USAGE);
    }
}
