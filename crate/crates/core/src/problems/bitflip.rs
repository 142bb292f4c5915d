//! The Bit-Flipping problem.
//!
//! Inputs are `m` bits. The first `f` ("flipping") bits are held fixed and
//! one of them, chosen uniformly, flips every `T` steps; the remaining
//! `m − f` bits are fresh coin flips every step. The target is a frozen
//! network with one hidden layer of LTUs over the `m` bits plus a constant
//! bias bit, with every weight drawn from `U{−1, +1}`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::net::{ltu_threshold, Activation, Layer, Network};
use crate::rng::{self, Stream, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BitFlipConfig {
    /// Number of input bits.
    pub m: usize,
    /// Number of flipping bits (a prefix of the input).
    pub f: usize,
    /// Steps between flips.
    pub period: u64,
    /// LTU threshold parameter.
    pub beta: f64,
    /// Hidden LTUs in the target network.
    pub target_width: usize,
}

impl Default for BitFlipConfig {
    fn default() -> Self {
        Self {
            m: 20,
            f: 15,
            period: 10_000,
            beta: 0.7,
            target_width: 100,
        }
    }
}

impl BitFlipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("bit-flipping needs m >= 1".into()));
        }
        if self.f > self.m {
            return Err(Error::InvalidConfig(format!(
                "flipping bits f = {} exceed input bits m = {}",
                self.f, self.m
            )));
        }
        if self.period == 0 {
            return Err(Error::InvalidConfig("flip period must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!(
                "beta must be in [0, 1], got {}",
                self.beta
            )));
        }
        if self.target_width == 0 {
            return Err(Error::InvalidConfig("target width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Builds the frozen LTU target network over `m + 1` inputs.
pub fn build_target<R: Rng + ?Sized>(cfg: &BitFlipConfig, rng: &mut R) -> Result<Network> {
    let inputs = cfg.m + 1;
    let width = cfg.target_width;
    let mut sign = || if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let hidden_w: Vec<f64> = (0..inputs * width).map(|_| sign()).collect();
    let out_w: Vec<f64> = (0..width).map(|_| sign()).collect();
    let thresholds = (0..width)
        .map(|k| {
            let v: Vec<f64> = hidden_w.iter().skip(k).step_by(width).copied().collect();
            ltu_threshold(&v, cfg.beta)
        })
        .collect::<Result<Vec<_>>>()?;
    Network::from_layers(vec![
        Layer::from_parts(
            inputs,
            width,
            hidden_w,
            vec![0.0; width],
            Activation::Ltu { thresholds },
            0.0,
        )?,
        Layer::from_parts(width, 1, out_w, vec![0.0], Activation::Linear, 0.0)?,
    ])
}

/// A seeded Bit-Flipping stream.
#[derive(Debug, Clone)]
pub struct BitFlipEnv {
    cfg: BitFlipConfig,
    flip_bits: Vec<u8>,
    step: u64,
    flips: u64,
    target: Network,
    rng: StreamRng,
    /// Per target unit: pre-activation contributed by the flipping bits and
    /// the bias bit, refreshed on every flip.
    base: Vec<f64>,
    thresholds: Vec<f64>,
    scratch: Vec<f64>,
}

impl BitFlipEnv {
    /// Target weights come from the seed's target stream; flips and noise
    /// bits from its data stream.
    pub fn new(cfg: &BitFlipConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let target = build_target(cfg, &mut rng::stream(seed, Stream::Target))?;
        let mut rng = rng::stream(seed, Stream::Data);
        let flip_bits = (0..cfg.f).map(|_| u8::from(rng.gen::<bool>())).collect();
        let thresholds = match target.layer(0).activation() {
            Activation::Ltu { thresholds } => thresholds.clone(),
            _ => unreachable!(),
        };
        let mut env = Self {
            cfg: *cfg,
            flip_bits,
            step: 0,
            flips: 0,
            target,
            rng,
            base: Vec::new(),
            thresholds,
            scratch: Vec::new(),
        };
        env.refresh_base();
        Ok(env)
    }

    pub fn config(&self) -> &BitFlipConfig {
        &self.cfg
    }

    pub fn target(&self) -> &Network {
        &self.target
    }

    pub fn flip_bits(&self) -> &[u8] {
        &self.flip_bits
    }

    /// Samples drawn so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn flips(&self) -> u64 {
        self.flips
    }

    fn refresh_base(&mut self) {
        let layer = self.target.layer(0);
        let mut base = layer.biases().to_vec();
        for (j, &bit) in self.flip_bits.iter().enumerate() {
            if bit == 1 {
                for (z, w) in base.iter_mut().zip(layer.row(j)) {
                    *z += w;
                }
            }
        }
        for (z, w) in base.iter_mut().zip(layer.row(self.cfg.m)) {
            *z += w;
        }
        self.base = base;
    }

    /// Target value for an `m`-bit input, computed by a full forward pass of
    /// the target network on `[x ‖ 1]`.
    pub fn target_value(&self, x: &[f64]) -> Result<f64> {
        let mut with_bias = x.to_vec();
        with_bias.push(1.0);
        Ok(self.target.forward(&with_bias)?.output()[0])
    }

    /// Draws the next sample into `x` (length `m`) and returns its target.
    pub fn next_into(&mut self, x: &mut [f64]) -> f64 {
        assert_eq!(x.len(), self.cfg.m, "bit-flipping input buffer");
        self.step += 1;
        if self.cfg.f > 0 && self.step.is_multiple_of(self.cfg.period) {
            let i = self.rng.gen_range(0..self.cfg.f);
            self.flip_bits[i] ^= 1;
            self.flips += 1;
            self.refresh_base();
        }
        let f = self.cfg.f;
        for (xi, &b) in x.iter_mut().zip(&self.flip_bits) {
            *xi = f64::from(b);
        }
        let mut word = 0u64;
        for (n, xi) in x[f..].iter_mut().enumerate() {
            if n % 64 == 0 {
                word = self.rng.gen();
            }
            *xi = (word & 1) as f64;
            word >>= 1;
        }

        // All target weights are ±1 and inputs are 0/1, so these sums are
        // small integers and exact in any summation order.
        let hidden = self.target.layer(0);
        let out = self.target.layer(1);
        let mut y = out.biases()[0];
        let mut z = std::mem::take(&mut self.scratch);
        z.clear();
        z.extend_from_slice(&self.base);
        for (j, &xi) in x.iter().enumerate().skip(f) {
            if xi != 0.0 {
                for (zk, w) in z.iter_mut().zip(hidden.row(j)) {
                    *zk += w;
                }
            }
        }
        for (k, (&zk, &theta)) in z.iter().zip(&self.thresholds).enumerate() {
            if zk > theta {
                y += out.weight(k, 0);
            }
        }
        self.scratch = z;
        y
    }

    pub fn next_sample(&mut self) -> (Vec<f64>, f64) {
        let mut x = vec![0.0; self.cfg.m];
        let y = self.next_into(&mut x);
        (x, y)
    }
}
