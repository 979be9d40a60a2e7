use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{load_cifar10_binary, synth_with, Dataset, Split, SynthParams};
use crate::models::nn::{Activation, Padding};
use crate::models::TrainConfig;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Flow,
    Ar,
    Encoder,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Flow => "flow",
            Family::Ar => "ar",
            Family::Encoder => "encoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Base,
    Ldt10,
    Ldt1,
    Ut,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Base => "base",
            Regime::Ldt10 => "ldt10",
            Regime::Ldt1 => "ldt1",
            Regime::Ut => "ut",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Cifar10,
}

/// Where train and evaluation images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: Source,
    /// CIFAR-10 batch directory.
    pub path: Option<PathBuf>,
    /// Training images (synthetic count, or a CIFAR prefix limit; 0 = all).
    pub train: usize,
    /// Evaluation images, same convention.
    pub eval: usize,
    pub side: usize,
    pub levels: usize,
    pub contrast: f64,
    pub falloff: f64,
    pub brightness_jitter: f64,
    pub noise_floor: f64,
    pub equal_variance: bool,
    /// Generate a single tier only.
    pub tier: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            path: None,
            train: 1000,
            eval: 250,
            side: 8,
            levels: 5,
            contrast: 0.2,
            falloff: 0.0,
            brightness_jitter: 0.1,
            noise_floor: 0.0,
            equal_variance: false,
            tier: None,
        }
    }
}

impl DatasetConfig {
    fn synth(&self, seed: u64, n: usize) -> Result<Dataset, HarnessError> {
        let p = SynthParams {
            seed,
            n,
            side: self.side,
            levels: self.levels,
            contrast: self.contrast,
            falloff: self.falloff,
            brightness_jitter: self.brightness_jitter,
            only_tier: self.tier,
            noise_floor: self.noise_floor,
            equal_variance: self.equal_variance,
        };
        Ok(synth_with(&p)?)
    }

    /// Training and evaluation splits; synthetic splits use independent seeds.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset), HarnessError> {
        match self.source {
            Source::Synthetic => Ok((
                self.synth(rng::mix(seed ^ 0x7121), self.train)?.with_name("train"),
                self.synth(rng::mix(seed ^ 0xE7A1), self.eval)?.with_name("eval"),
            )),
            Source::Cifar10 => {
                let path = self
                    .path
                    .as_deref()
                    .ok_or_else(|| HarnessError::Config("cifar10 source needs dataset.path".into()))?;
                let prefix = |ds: Dataset, n: usize| -> Result<Dataset, HarnessError> {
                    if n == 0 || n >= ds.len() {
                        return Ok(ds);
                    }
                    Ok(ds.subset(&ds.ids()[..n].to_vec())?)
                };
                Ok((
                    prefix(load_cifar10_binary(path, Split::Train)?, self.train)?.with_name("train"),
                    prefix(load_cifar10_binary(path, Split::Test)?, self.eval)?.with_name("eval"),
                ))
            }
        }
    }
}

/// Coupling conditioner for image flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionerKind {
    /// Weight-shared convolutions over the masked image.
    Conv,
    /// Fully connected on the conditioning entries.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub flow_layers: usize,
    pub flow_conditioner: ConditionerKind,
    /// Odd kernel side of the convolutional conditioner.
    pub flow_kernel: usize,
    pub flow_padding: Padding,
    /// 0 keeps the conditioner's default width.
    pub flow_hidden: usize,
    pub flow_activation: Activation,
    pub log_scale_bound: f64,
    pub ar_hidden: usize,
    pub ar_radius: usize,
    pub encoder_hidden: usize,
    pub encoder_features: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            flow_layers: 8,
            flow_conditioner: ConditionerKind::Conv,
            flow_kernel: 3,
            flow_padding: Padding::Zero,
            flow_hidden: 0,
            flow_activation: Activation::Tanh,
            log_scale_bound: 3.0,
            ar_hidden: 64,
            ar_radius: 2,
            encoder_hidden: 32,
            encoder_features: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StripConfig {
    pub bins: usize,
    pub per_bin: usize,
}

impl Default for StripConfig {
    fn default() -> Self {
        Self { bins: 10, per_bin: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub variance: f64,
    pub noise_seed: u64,
    /// The simpler dataset scored by the model trained on `[dataset]`.
    pub simple: DatasetConfig,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            variance: 0.0064,
            noise_seed: 1,
            simple: DatasetConfig {
                tier: Some(1),
                ..DatasetConfig::default()
            },
        }
    }
}

/// One experiment, parsed from a TOML file whose text is kept verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub family: Family,
    pub regime: Regime,
    pub ldt_fraction: f64,
    /// Empty selects `{E / 10, E}`.
    pub checkpoint_epochs: Vec<usize>,
    /// Run directory; left out of the config echo so it cannot change hashes.
    #[serde(skip_serializing)]
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub strip: StripConfig,
    pub perturb: PerturbConfig,
    #[serde(skip)]
    pub source_text: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            family: Family::Flow,
            regime: Regime::Base,
            ldt_fraction: 0.1,
            checkpoint_epochs: Vec::new(),
            output: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            strip: StripConfig::default(),
            perturb: PerturbConfig::default(),
            source_text: String::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.source_text = text.to_string();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Text echoed into manifests; a serialization of the parsed config when
    /// it was built in code.
    pub fn echo(&self) -> String {
        if self.source_text.is_empty() {
            toml::to_string(self).expect("config serializes")
        } else {
            self.source_text.clone()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.ldt_fraction > 0.0 && self.ldt_fraction <= 1.0) {
            return Err(HarnessError::Config(format!(
                "ldt_fraction must lie in (0, 1], got {}",
                self.ldt_fraction
            )));
        }
        if self.checkpoint_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Config("checkpoint_epochs must be strictly ascending".into()));
        }
        if self.checkpoint_epochs.iter().any(|&e| e > self.train.epochs) {
            return Err(HarnessError::Config("checkpoint epoch beyond train.epochs".into()));
        }
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Training epochs under the configured regime (0 for UT).
    pub fn effective_epochs(&self) -> usize {
        match self.regime {
            Regime::Ut => 0,
            _ => self.train.epochs,
        }
    }

    pub fn checkpoints(&self) -> Vec<usize> {
        let e = self.effective_epochs();
        if e == 0 {
            return vec![0];
        }
        if !self.checkpoint_epochs.is_empty() {
            return self.checkpoint_epochs.clone();
        }
        let early = (e / 10).max(1);
        if early == e {
            vec![e]
        } else {
            vec![early, e]
        }
    }

    /// Seed for one named purpose, derived from the global seed.
    pub fn derived_seed(&self, purpose: &str) -> u64 {
        purpose
            .bytes()
            .fold(rng::mix(self.seed), |acc, b| rng::mix(acc ^ u64::from(b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_defaults() {
        let text = r#"
name = "t"
seed = 3
family = "ar"
regime = "ldt1"

[dataset]
train = 20
eval = 10
side = 4

[train]
epochs = 30
learning_rate = 0.01
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.family, Family::Ar);
        assert_eq!(cfg.regime, Regime::Ldt1);
        assert_eq!(cfg.dataset.train, 20);
        assert_eq!(cfg.dataset.levels, 5);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.checkpoints(), vec![3, 30]);
        assert_eq!(cfg.echo(), text);
        assert_eq!(cfg.strip.bins, 10);
        assert_eq!(cfg.perturb.variance, 0.0064);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::parse("ldt_fraction = 0.0").is_err());
        assert!(ExperimentConfig::parse("ldt_fraction = 1.5").is_err());
        assert!(ExperimentConfig::parse("checkpoint_epochs = [5, 2]").is_err());
        assert!(ExperimentConfig::parse("unknown_key = 1").is_err());
        assert!(ExperimentConfig::parse("[train]\nlearning_rate = -1.0").is_err());
    }

    #[test]
    fn ut_has_a_single_epoch_zero_checkpoint() {
        let cfg = ExperimentConfig {
            regime: Regime::Ut,
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.checkpoints(), vec![0]);
        assert_eq!(cfg.effective_epochs(), 0);
    }

    #[test]
    fn synthetic_splits_differ_and_repeat() {
        let cfg = DatasetConfig {
            train: 10,
            eval: 5,
            ..DatasetConfig::default()
        };
        let (a, b) = cfg.load(1).unwrap();
        assert_eq!((a.len(), b.len()), (10, 5));
        assert_ne!(a.images()[0], b.images()[0]);
        assert_eq!(cfg.load(1).unwrap().0, a);
    }
}
