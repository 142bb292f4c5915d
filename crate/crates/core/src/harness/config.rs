//! Declarative experiment configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::gnt::{GntConfig, UtilityKind};
use crate::net::Activation;
use crate::optim::{AdamConfig, SgdConfig};
use crate::problems::BitFlipConfig;
use crate::{Error, Result};

/// Environment variable naming the MNIST data directory when a config does
/// not set `data_dir`.
pub const MNIST_DIR_ENV: &str = "CBP_MNIST_DIR";

pub const DEFAULT_BITFLIP_BIN: u64 = 20_000;
pub const DEFAULT_MNIST_BIN: u64 = 60_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnistProblemConfig {
    /// Directory holding `train-{images,labels}-idx*-ubyte[.gz]`.
    pub data_dir: Option<PathBuf>,
    /// Examples per pixel permutation.
    pub period: u64,
}

impl Default for MnistProblemConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            period: 60_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Bitflip(BitFlipConfig),
    PermutedMnist(MnistProblemConfig),
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::Bitflip(BitFlipConfig::default())
    }
}

impl ProblemConfig {
    pub fn default_bin_size(&self) -> u64 {
        match self {
            ProblemConfig::Bitflip(_) => DEFAULT_BITFLIP_BIN,
            ProblemConfig::PermutedMnist(_) => DEFAULT_MNIST_BIN,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, ProblemConfig::PermutedMnist(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    /// Hidden layer widths; empty gives a linear learner.
    pub hidden: Vec<usize>,
    pub activation: String,
    pub leaky_slope: f64,
    pub elu_alpha: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![5],
            activation: "tanh".into(),
            leaky_slope: Activation::DEFAULT_LEAKY_SLOPE,
            elu_alpha: Activation::DEFAULT_ELU_ALPHA,
        }
    }
}

impl LearnerConfig {
    pub fn hidden_activation(&self) -> Result<Activation> {
        Ok(match Activation::from_name(&self.activation)? {
            Activation::LeakyRelu { .. } => Activation::LeakyRelu {
                slope: self.leaky_slope,
            },
            Activation::Elu { .. } => Activation::Elu {
                alpha: self.elu_alpha,
            },
            other => other,
        })
    }

    /// Layer widths and activations for a learner with the given input and
    /// output sizes.
    pub fn layout(&self, inputs: usize, outputs: usize) -> Result<(Vec<usize>, Vec<Activation>)> {
        let act = self.hidden_activation()?;
        let mut widths = vec![inputs];
        widths.extend(&self.hidden);
        widths.push(outputs);
        let mut acts = vec![act; self.hidden.len()];
        acts.push(Activation::Linear);
        Ok((widths, acts))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Bp,
    BpL2,
    Cbp,
}

impl AlgorithmKind {
    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::Bp => "bp",
            AlgorithmKind::BpL2 => "bp_l2",
            AlgorithmKind::Cbp => "cbp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    pub optimizer: OptimizerKind,
    pub step_size: f64,
    pub weight_decay: f64,
    pub replacement_rate: f64,
    pub decay_rate: f64,
    pub maturity_threshold: u64,
    pub utility: UtilityKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        let gnt = GntConfig::default();
        let adam = AdamConfig::new(0.01);
        Self {
            kind: AlgorithmKind::Bp,
            optimizer: OptimizerKind::Sgd,
            step_size: 0.01,
            weight_decay: 0.0,
            replacement_rate: gnt.replacement_rate,
            decay_rate: gnt.decay_rate,
            maturity_threshold: gnt.maturity_threshold,
            utility: gnt.utility,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl AlgorithmConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            step_size: self.step_size,
            weight_decay: self.weight_decay,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            step_size: self.step_size,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn gnt(&self) -> GntConfig {
        GntConfig {
            replacement_rate: self.replacement_rate,
            decay_rate: self.decay_rate,
            maturity_threshold: self.maturity_threshold,
            utility: self.utility,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.optimizer {
            OptimizerKind::Sgd => self.sgd().validate()?,
            OptimizerKind::Adam => self.adam().validate()?,
        }
        match self.kind {
            AlgorithmKind::Bp if self.weight_decay != 0.0 => Err(Error::InvalidConfig(
                "algorithm bp has no weight decay; use bp_l2".into(),
            )),
            AlgorithmKind::Cbp => self.gnt().validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricToggles {
    /// Per-layer fraction of hidden features with `|h| > 0.9`.
    pub saturation: bool,
    /// Mean `|g|` over first-layer weights.
    pub input_grad: bool,
    /// Mean `|w|` of the output layer at the end of each bin.
    pub weight_mag: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        Self {
            saturation: true,
            input_grad: true,
            weight_mag: true,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub algorithm: AlgorithmConfig,
    pub steps: u64,
    /// Defaults to 20000 for Bit-Flipping and 60000 for Permuted MNIST.
    #[serde(default)]
    pub bin_size: Option<u64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub metrics: MetricToggles,
}

impl ExperimentConfig {
    /// Bit-Flipping defaults with a 20→5→1 tanh learner under SGD.
    pub fn bitflip(steps: u64) -> Self {
        Self {
            problem: ProblemConfig::default(),
            learner: LearnerConfig::default(),
            algorithm: AlgorithmConfig::default(),
            steps,
            bin_size: None,
            seeds: default_seeds(),
            metrics: MetricToggles::default(),
        }
    }

    pub fn bin_size(&self) -> u64 {
        self.bin_size
            .unwrap_or_else(|| self.problem.default_bin_size())
    }

    pub fn num_bins(&self) -> u64 {
        self.steps / self.bin_size()
    }

    /// Fills defaulted fields with their resolved values.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.bin_size = Some(self.bin_size());
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bin = self.bin_size();
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if bin == 0 || !self.steps.is_multiple_of(bin) {
            return Err(Error::InvalidConfig(format!(
                "bin size {bin} must divide steps {}",
                self.steps
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.learner.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden widths must be > 0".into()));
        }
        self.learner.hidden_activation()?;
        self.algorithm.validate()?;
        if self.algorithm.kind == AlgorithmKind::Cbp && self.learner.hidden.is_empty() {
            return Err(Error::InvalidConfig(
                "cbp needs at least one hidden layer".into(),
            ));
        }
        match &self.problem {
            ProblemConfig::Bitflip(b) => b.validate(),
            ProblemConfig::PermutedMnist(m) if m.period == 0 => Err(Error::InvalidConfig(
                "permutation period must be >= 1".into(),
            )),
            ProblemConfig::PermutedMnist(_) => Ok(()),
        }
    }
}
