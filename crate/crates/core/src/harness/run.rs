//! The prequential online loop: every sample is first used to measure the
//! learner's error, then to update it.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{AlgorithmKind, ExperimentConfig, OptimizerKind, ProblemConfig, MNIST_DIR_ENV};
use crate::gnt::Gnt;
use crate::net::{init_network, ForwardTrace, Gradients, Network};
use crate::optim::Optimizer;
use crate::problems::mnist::{load_mnist_dir, NUM_CLASSES};
use crate::problems::{BitFlipEnv, MnistDataset, MnistStream};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Hidden features with `|h|` above this count as saturated.
pub const SATURATION_THRESHOLD: f64 = 0.9;

/// Data shared by every run of an experiment.
#[derive(Debug, Clone, Default)]
pub struct Resources {
    pub mnist: Option<Arc<MnistDataset>>,
}

impl Resources {
    /// Loads whatever `cfg` needs. The MNIST directory comes from the config,
    /// falling back to the `CBP_MNIST_DIR` environment variable.
    pub fn load_for(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.problem {
            ProblemConfig::Bitflip(_) => Ok(Self::default()),
            ProblemConfig::PermutedMnist(m) => {
                let dir = m
                    .data_dir
                    .clone()
                    .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "permuted_mnist needs problem.data_dir or {MNIST_DIR_ENV}"
                        ))
                    })?;
                Ok(Self {
                    mnist: Some(Arc::new(load_mnist_dir(&dir)?)),
                })
            }
        }
    }
}

/// Per-bin summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMetrics {
    pub bin: u64,
    /// Mean per-step loss.
    pub loss: f64,
    /// Fraction of correct top-1 predictions (classification only).
    pub accuracy: Option<f64>,
    /// Mean `|w|` of the output layer at the end of the bin.
    pub weight_mag: Option<f64>,
    /// Mean saturated fraction per hidden layer; empty when disabled.
    pub saturation: Vec<f64>,
    /// Mean `|g|` over first-layer weights.
    pub input_grad_mag: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub bin_size: u64,
    /// Completed bins. A diverged run keeps only the bins that finished
    /// before the divergence.
    pub bins: Vec<BinMetrics>,
    /// Sum of per-step losses; infinite for a diverged run.
    pub total_loss: f64,
    /// Step at which the loss or an update first became non-finite.
    pub diverged_at: Option<u64>,
    /// Hash of every `(x, y)` consumed, for checking stream identity.
    pub data_checksum: u64,
    pub replacements: u64,
}

impl RunMetrics {
    pub fn losses(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.loss).collect()
    }
}

/// Fraction of units in `h` with `|h| > threshold`.
pub fn saturation_fraction(h: &[f64], threshold: f64) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    h.iter().filter(|v| v.abs() > threshold).count() as f64 / h.len() as f64
}

/// Mean `|g|` over the first layer's weight gradients.
pub fn input_grad_magnitude(grads: &Gradients) -> f64 {
    let w = &grads.layers[0].weights;
    if w.is_empty() {
        return 0.0;
    }
    w.iter().map(|g| g.abs()).sum::<f64>() / w.len() as f64
}

/// Softmax cross-entropy of `logits` against `label`. Writes `p − onehot`
/// into `grad` and returns `(loss, argmax)`; ties go to the lowest index.
pub fn softmax_cross_entropy(logits: &[f64], label: usize, grad: &mut [f64]) -> (f64, usize) {
    let (argmax, max) =
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
    let mut sum = 0.0;
    for (g, &z) in grad.iter_mut().zip(logits) {
        *g = (z - max).exp();
        sum += *g;
    }
    for g in grad.iter_mut() {
        *g /= sum;
    }
    let loss = sum.ln() - (logits[label] - max);
    grad[label] -= 1.0;
    (loss, argmax)
}

/// A network plus everything needed to train it online.
#[derive(Debug, Clone)]
pub struct Learner {
    pub net: Network,
    pub optimizer: Optimizer,
    pub gnt: Option<Gnt>,
    pub trace: ForwardTrace,
    pub grads: Gradients,
    scratch: Vec<f64>,
}

impl Learner {
    pub fn new(cfg: &ExperimentConfig, seed: u64, inputs: usize, outputs: usize) -> Result<Self> {
        let (widths, acts) = cfg.learner.layout(inputs, outputs)?;
        let net = init_network(&widths, &acts, seed)?;
        let alg = &cfg.algorithm;
        let optimizer = match alg.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(alg.sgd())?,
            OptimizerKind::Adam => Optimizer::adam(alg.adam(), &net)?,
        };
        let gnt = match alg.kind {
            AlgorithmKind::Cbp => Some(Gnt::new(
                &net,
                alg.gnt(),
                rng::stream(seed, Stream::Replacement),
            )?),
            AlgorithmKind::Bp | AlgorithmKind::BpL2 => None,
        };
        Ok(Self {
            trace: net.new_trace(),
            grads: Gradients::zeros_like(&net),
            net,
            optimizer,
            gnt,
            scratch: Vec::new(),
        })
    }

    /// Forward pass on `x`; the output is `self.trace.output()`.
    pub fn predict(&mut self, x: &[f64]) -> Result<()> {
        self.net.forward_into(x, &mut self.trace)
    }

    /// Backward pass from `loss_grad` using the last prediction's trace.
    pub fn backward(&mut self, loss_grad: &[f64]) -> Result<()> {
        self.net
            .backward_into(&self.trace, loss_grad, &mut self.grads, &mut self.scratch)
    }

    /// Applies the optimizer and, for continual backprop, a
    /// generate-and-test pass. Returns the number of features replaced.
    pub fn update(&mut self) -> Result<usize> {
        self.optimizer.step(&mut self.net, &self.grads)?;
        match &mut self.gnt {
            Some(g) => {
                g.update_and_replace(&mut self.net, &self.trace, self.optimizer.adam_state_mut())
            }
            None => Ok(0),
        }
    }
}

enum Source {
    BitFlip(BitFlipEnv),
    Mnist(MnistStream),
}

enum Target {
    Value(f64),
    Class(usize),
}

impl Source {
    fn new(cfg: &ExperimentConfig, seed: u64, res: &Resources) -> Result<Self> {
        Ok(match &cfg.problem {
            ProblemConfig::Bitflip(b) => Source::BitFlip(BitFlipEnv::new(b, seed)?),
            ProblemConfig::PermutedMnist(m) => {
                let data = res.mnist.clone().ok_or_else(|| {
                    Error::InvalidConfig("permuted_mnist run without a loaded dataset".into())
                })?;
                Source::Mnist(MnistStream::new(data, m.period, seed)?)
            }
        })
    }

    fn widths(&self) -> (usize, usize) {
        match self {
            Source::BitFlip(e) => (e.config().m, 1),
            Source::Mnist(s) => (s.input_width(), NUM_CLASSES),
        }
    }

    fn next_into(&mut self, x: &mut [f64]) -> Target {
        match self {
            Source::BitFlip(e) => Target::Value(e.next_into(x)),
            Source::Mnist(s) => Target::Class(usize::from(s.next_into(x).0)),
        }
    }
}

#[derive(Default)]
struct BinAccumulator {
    loss: f64,
    correct: u64,
    saturation: Vec<f64>,
    input_grad: f64,
}

/// Runs one seed of `cfg` and returns its binned metrics.
pub fn run_online(cfg: &ExperimentConfig, seed: u64, res: &Resources) -> Result<RunMetrics> {
    cfg.validate()?;
    let mut source = Source::new(cfg, seed, res)?;
    let (inputs, outputs) = source.widths();
    let mut learner = Learner::new(cfg, seed, inputs, outputs)?;
    let bin_size = cfg.bin_size();
    let toggles = cfg.metrics;
    let hidden_layers = learner.net.num_hidden_layers();

    let mut x = vec![0.0; inputs];
    let mut loss_grad = vec![0.0; outputs];
    let mut hasher = DefaultHasher::new();
    let mut acc = BinAccumulator {
        saturation: vec![0.0; hidden_layers],
        ..BinAccumulator::default()
    };
    let mut bins = Vec::with_capacity(cfg.num_bins() as usize);
    let mut total_loss = 0.0;
    let mut diverged_at = None;
    let mut classification = false;

    for step in 1..=cfg.steps {
        let target = source.next_into(&mut x);
        for v in &x {
            hasher.write_u64(v.to_bits());
        }
        learner.predict(&x)?;
        let out = learner.trace.output();
        let loss = match target {
            Target::Value(y) => {
                hasher.write_u64(y.to_bits());
                let e = out[0] - y;
                loss_grad[0] = 2.0 * e;
                e * e
            }
            Target::Class(label) => {
                hasher.write_usize(label);
                classification = true;
                let (loss, argmax) = softmax_cross_entropy(out, label, &mut loss_grad);
                acc.correct += u64::from(argmax == label);
                loss
            }
        };
        if !loss.is_finite() {
            diverged_at = Some(step);
            break;
        }
        acc.loss += loss;
        if toggles.saturation {
            for (s, h) in acc.saturation.iter_mut().zip(&learner.trace.post) {
                *s += saturation_fraction(h, SATURATION_THRESHOLD);
            }
        }

        learner.backward(&loss_grad)?;
        if toggles.input_grad {
            acc.input_grad += input_grad_magnitude(&learner.grads);
        }
        match learner.update() {
            Ok(_) => {}
            Err(Error::NonFinite(_)) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }

        if step % bin_size == 0 {
            let n = bin_size as f64;
            total_loss += acc.loss;
            bins.push(BinMetrics {
                bin: step / bin_size - 1,
                loss: acc.loss / n,
                accuracy: classification.then(|| acc.correct as f64 / n),
                weight_mag: toggles
                    .weight_mag
                    .then(|| learner.net.output_layer().mean_abs_weight()),
                saturation: if toggles.saturation {
                    acc.saturation.iter().map(|s| s / n).collect()
                } else {
                    Vec::new()
                },
                input_grad_mag: toggles.input_grad.then(|| acc.input_grad / n),
            });
            acc = BinAccumulator {
                saturation: vec![0.0; hidden_layers],
                ..BinAccumulator::default()
            };
        }
    }

    Ok(RunMetrics {
        seed,
        bin_size,
        bins,
        total_loss: if diverged_at.is_some() {
            f64::INFINITY
        } else {
            total_loss
        },
        diverged_at,
        data_checksum: hasher.finish(),
        replacements: learner.gnt.as_ref().map_or(0, Gnt::replaced_total),
    })
}
