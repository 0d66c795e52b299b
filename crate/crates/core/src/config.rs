//! Experiment configuration.
//!
//! Configs are TOML documents: top-level `seed` / `output_dir`, and the
//! sections `[data]`, `[training]`, `[memory]`, `[perturbation]` and
//! `[federation]`. Every key is optional; unknown keys are
//! rejected. See `README.md` for the full key list and defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{AggregationStrategy, CommSchedule};
use crate::memory::MemoryPolicy;
use crate::model::OptimizerKind;
use crate::stream::{DatasetFormat, TaskAssignment};
use crate::uncertainty::{PerturbationKind, PerturbationSpec, UncertaintyMetric};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub sigma: f64,
    pub path: Option<PathBuf>,
    pub format: DatasetFormat,
    pub tasks: usize,
    pub assignment: TaskAssignment,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_classes: 8,
            samples_per_class: 400,
            dim: 16,
            spread: 3.0,
            sigma: 1.0,
            path: None,
            format: DatasetFormat::Csv,
            tasks: 4,
            assignment: TaskAssignment::RandomShuffle,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub reset_optimizer_on_sync: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            hidden: vec![64],
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            reset_optimizer_on_sync: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub capacity: usize,
    pub policy: MemoryPolicy,
    pub metric: UncertaintyMetric,
    /// Rescore already-stored samples of a class whenever that class is
    /// admitted again, instead of keeping their admission-time scores.
    pub rescore_stored: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 100,
            policy: MemoryPolicy::BottomK,
            metric: UncertaintyMetric::Bi,
            rescore_stored: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationName {
    #[default]
    Gaussian,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub count: usize,
    pub kind: PerturbationName,
    pub sigma: f64,
    pub mask_fraction: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            count: 12,
            kind: PerturbationName::Gaussian,
            sigma: 0.1,
            mask_fraction: 0.2,
        }
    }
}

impl PerturbationConfig {
    pub fn spec(&self) -> PerturbationSpec {
        PerturbationSpec {
            count: self.count,
            kind: match self.kind {
                PerturbationName::Gaussian => PerturbationKind::GaussianNoise { sigma: self.sigma },
                PerturbationName::Mask => PerturbationKind::ElementMask {
                    fraction: self.mask_fraction,
                },
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub burn_in: usize,
    pub q: usize,
    pub aggregation: AggregationStrategy,
    pub fedprox_mu: f64,
    pub temporal_smoothing: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            burn_in: 30,
            q: 5,
            aggregation: AggregationStrategy::FedAvg,
            fedprox_mu: 0.01,
            temporal_smoothing: true,
        }
    }
}

impl FederationConfig {
    pub fn schedule(&self) -> CommSchedule {
        CommSchedule {
            burn_in: self.burn_in,
            q: self.q,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub memory: MemoryConfig,
    pub perturbation: PerturbationConfig,
    pub federation: FederationConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io("reading config", path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        let d = &self.data;
        positive("data.tasks", d.tasks)?;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        match d.source {
            DataSource::Synthetic => {
                if d.num_classes < 2 {
                    return Err(Error::config("data.num_classes", "must be at least 2"));
                }
                if d.tasks > d.num_classes {
                    return Err(Error::config("data.tasks", "cannot exceed data.num_classes"));
                }
                positive("data.samples_per_class", d.samples_per_class)?;
                if d.dim < 2 {
                    return Err(Error::config("data.dim", "must be at least 2"));
                }
                if !(d.spread > 0.0 && d.spread.is_finite()) {
                    return Err(Error::config("data.spread", "must be positive"));
                }
                if !(d.sigma > 0.0 && d.sigma.is_finite()) {
                    return Err(Error::config("data.sigma", "must be positive"));
                }
            }
            DataSource::File => {
                if d.path.is_none() {
                    return Err(Error::config("data.path", "required when data.source = \"file\""));
                }
            }
        }
        let t = &self.training;
        positive("training.batch_size", t.batch_size)?;
        if t.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("training.hidden", "every width must be positive"));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::config("training.learning_rate", "must be positive"));
        }
        positive("perturbation.count", self.perturbation.count)?;
        self.perturbation.spec().validate().map_err(|e| match e {
            Error::InvalidConfig { field, reason } => Error::config(format!("perturbation.{field}"), reason),
            other => other,
        })?;
        let f = &self.federation;
        positive("federation.clients", f.clients)?;
        positive("federation.q", f.q)?;
        if !(f.fedprox_mu >= 0.0 && f.fedprox_mu.is_finite()) {
            return Err(Error::config("federation.fedprox_mu", "must be nonnegative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.training.batch_size, 10);
        assert_eq!(c.federation.burn_in, 30);
        assert_eq!(c.federation.q, 5);
        assert_eq!(c.federation.clients, 5);
        assert_eq!(c.perturbation.count, 12);
        assert_eq!(c.federation.fedprox_mu, 0.01);
        assert_eq!(c.data.test_fraction, 0.2);
    }

    #[test]
    fn zero_clients_names_field() {
        match ExperimentConfig::parse("[federation]\nclients = 0\n") {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "federation.clients"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_report_line() {
        match ExperimentConfig::parse("seed = 1\n\n[memory]\ncapacty = 10\n") {
            Err(Error::ConfigParse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("capacty"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn enums_parse_from_snake_case() {
        let c = ExperimentConfig::parse(
            "[memory]\npolicy = \"top_k\"\nmetric = \"en\"\n[federation]\naggregation = \"class_weighted\"\nq = 7\n",
        )
        .unwrap();
        assert_eq!(c.memory.policy, MemoryPolicy::TopK);
        assert_eq!(c.memory.metric, UncertaintyMetric::En);
        assert_eq!(c.federation.aggregation, AggregationStrategy::ClassWeighted);
        assert_eq!(c.federation.q, 7);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.seed = 17;
        c.memory.capacity = 0;
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn file_source_needs_path() {
        assert!(ExperimentConfig::parse("[data]\nsource = \"file\"\n").is_err());
    }
}
