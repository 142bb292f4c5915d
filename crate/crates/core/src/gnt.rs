//! Generate-and-test feature replacement (continual backprop).
//!
//! Every step, each hidden feature's utility is updated from its activation
//! and its incoming/outgoing weight magnitudes. Once a feature is older than
//! the maturity threshold it becomes eligible, and a fraction `ρ` of the
//! eligible features with the lowest utility are replaced: incoming weights
//! are redrawn from the layer's initialization distribution, outgoing weights
//! are zeroed (so the network function is unchanged), and the feature's
//! utility, running mean activation and age restart from zero.
//!
//! The utility update rules are exposed as plain functions so they can be
//! checked in isolation; [`Gnt`] wires them to a network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::net::{draw_init_weight, ForwardTrace, Gradients, Network};
use crate::optim::{AdamState, Optimizer};
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Floor for the input-weight magnitude sum in the adaptation term.
pub const MIN_INPUT_MAGNITUDE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    Random,
    WeightMagnitude,
    Contribution,
    MeanCorrectedContribution,
    Adaptation,
    Overall,
}

impl UtilityKind {
    pub const ALL: [UtilityKind; 6] = [
        UtilityKind::Random,
        UtilityKind::WeightMagnitude,
        UtilityKind::Contribution,
        UtilityKind::MeanCorrectedContribution,
        UtilityKind::Adaptation,
        UtilityKind::Overall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UtilityKind::Random => "random",
            UtilityKind::WeightMagnitude => "weight_magnitude",
            UtilityKind::Contribution => "contribution",
            UtilityKind::MeanCorrectedContribution => "mean_corrected_contribution",
            UtilityKind::Adaptation => "adaptation",
            UtilityKind::Overall => "overall",
        }
    }

    fn needs_outgoing(self) -> bool {
        !matches!(self, UtilityKind::Random | UtilityKind::Adaptation)
    }

    fn needs_incoming(self) -> bool {
        matches!(self, UtilityKind::Adaptation | UtilityKind::Overall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GntConfig {
    /// Fraction `ρ` of eligible features replaced per step.
    pub replacement_rate: f64,
    /// Decay `η` of the running averages.
    pub decay_rate: f64,
    /// Features become eligible once their age exceeds this.
    pub maturity_threshold: u64,
    pub utility: UtilityKind,
}

impl Default for GntConfig {
    fn default() -> Self {
        Self {
            replacement_rate: 1e-4,
            decay_rate: 0.99,
            maturity_threshold: 100,
            utility: UtilityKind::Overall,
        }
    }
}

impl GntConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.replacement_rate.is_finite() && self.replacement_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "replacement rate must be >= 0, got {}",
                self.replacement_rate
            )));
        }
        if !(0.0..1.0).contains(&self.decay_rate) {
            return Err(Error::InvalidConfig(format!(
                "decay rate must be in [0, 1), got {}",
                self.decay_rate
            )));
        }
        Ok(())
    }
}

#[inline]
fn decay_pow(decay: f64, age: u64) -> f64 {
    decay.powi(age.min(i32::MAX as u64) as i32)
}

/// Bias-corrected running average `prev / (1 − η^age)`; zero at age 0.
#[inline]
pub fn bias_corrected(prev: f64, decay: f64, age: u64) -> f64 {
    if age == 0 {
        0.0
    } else {
        prev / (1.0 - decay_pow(decay, age))
    }
}

/// Contribution utility: `c' = (1−η)|h|Σ|w_out| + ηc`.
#[inline]
pub fn update_contribution(c: f64, h: f64, out_mag: f64, decay: f64) -> f64 {
    (1.0 - decay) * h.abs() * out_mag + decay * c
}

/// Mean-corrected contribution utility. Returns `(z', f')`.
///
/// The mean estimate `f̂` is bias-corrected from the running mean *before*
/// this step's activation is folded in.
#[inline]
pub fn update_mean_corrected(
    z: f64,
    f: f64,
    h: f64,
    out_mag: f64,
    decay: f64,
    age: u64,
) -> (f64, f64) {
    let f_hat = bias_corrected(f, decay, age);
    let f_next = (1.0 - decay) * h + decay * f;
    let z_next = (1.0 - decay) * (h - f_hat).abs() * out_mag + decay * z;
    (z_next, f_next)
}

/// Adaptation utility: running average of `1 / Σ|w_in|`.
#[inline]
pub fn update_adaptation(a: f64, in_mag: f64, decay: f64) -> f64 {
    (1.0 - decay) / in_mag.max(MIN_INPUT_MAGNITUDE) + decay * a
}

/// Overall utility. Returns `(u', f', û)` where `û` is bias-corrected from
/// the pre-update `u`.
#[inline]
pub fn update_overall(
    u: f64,
    f: f64,
    h: f64,
    in_mag: f64,
    out_mag: f64,
    decay: f64,
    age: u64,
) -> (f64, f64, f64) {
    let f_hat = bias_corrected(f, decay, age);
    let f_next = (1.0 - decay) * h + decay * f;
    let y = (h - f_hat).abs() * out_mag / in_mag.max(MIN_INPUT_MAGNITUDE);
    let u_next = (1.0 - decay) * y + decay * u;
    let u_hat = bias_corrected(u, decay, age);
    (u_next, f_next, u_hat)
}

/// Weight-magnitude utility: running average of `Σ|w_out|`.
#[inline]
pub fn update_weight_magnitude(wm: f64, out_mag: f64, decay: f64) -> f64 {
    (1.0 - decay) * out_mag + decay * wm
}

/// Random utility: a fresh `U[0, 1)` draw.
#[inline]
pub fn update_random_utility<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.gen::<f64>()
}

/// Per-layer tester state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    /// Running utility (`u`, `c`, `z`, `a`, `wm` or `r` by utility kind).
    pub utility: Vec<f64>,
    /// Running mean activation `f`.
    pub mean_act: Vec<f64>,
    pub age: Vec<u64>,
    /// Value ranked at the last selection (bias-corrected `û` for the
    /// overall utility, the running utility otherwise).
    pub score: Vec<f64>,
    eligible_steps: u64,
    spent: u64,
}

impl FeatureLayer {
    pub fn new(n: usize) -> Self {
        Self {
            utility: vec![0.0; n],
            mean_act: vec![0.0; n],
            age: vec![0; n],
            score: vec![0.0; n],
            eligible_steps: 0,
            spent: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.age.len()
    }

    pub fn is_empty(&self) -> bool {
        self.age.is_empty()
    }

    /// Replacement budget banked but not yet spent, in `[0, 1)` after
    /// every selection.
    pub fn frac_acc(&self, replacement_rate: f64) -> f64 {
        self.eligible_steps as f64 * replacement_rate - self.spent as f64
    }

    /// Total replacements granted so far.
    pub fn replacements_granted(&self) -> u64 {
        self.spent
    }

    fn clear_feature(&mut self, i: usize) {
        self.utility[i] = 0.0;
        self.mean_act[i] = 0.0;
        self.age[i] = 0;
        self.score[i] = 0.0;
    }
}

/// Tester state for every hidden layer of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct GntState {
    pub layers: Vec<FeatureLayer>,
}

impl GntState {
    pub fn new(net: &Network) -> Self {
        Self {
            layers: net.layers()[..net.num_hidden_layers()]
                .iter()
                .map(|l| FeatureLayer::new(l.fan_out()))
                .collect(),
        }
    }
}

/// Picks the features of one layer to replace this step.
///
/// The budget accrues `n_eligible · ρ` per call; its integer part is spent on
/// the eligible features with the smallest score (ties to the lowest index).
pub fn select_replacements(layer: &mut FeatureLayer, cfg: &GntConfig) -> Vec<usize> {
    let m = cfg.maturity_threshold;
    let n_eligible = layer.age.iter().filter(|&&a| a > m).count();
    layer.eligible_steps += n_eligible as u64;
    // Recomputing from integer counts keeps the budget free of drift.
    let granted = (layer.eligible_steps as f64 * cfg.replacement_rate).floor() as u64;
    let k = granted.saturating_sub(layer.spent);
    layer.spent = layer.spent.max(granted);
    if k == 0 || n_eligible == 0 {
        return Vec::new();
    }
    let mut eligible: Vec<usize> = (0..layer.len()).filter(|&i| layer.age[i] > m).collect();
    let k = (k as usize).min(eligible.len());
    eligible.sort_by(|&a, &b| layer.score[a].total_cmp(&layer.score[b]).then(a.cmp(&b)));
    eligible.truncate(k);
    eligible
}

/// Replaces hidden features `idx` of hidden layer `layer`.
///
/// Incoming weights are redrawn from `U(-b, b)` with the layer's init bound,
/// the bias and all outgoing weights are zeroed, and tester state (plus Adam
/// moments and timesteps of every touched weight) is reset.
pub fn replace_features<R: Rng + ?Sized>(
    net: &mut Network,
    mut adam: Option<&mut AdamState>,
    state: &mut FeatureLayer,
    layer: usize,
    idx: &[usize],
    rng: &mut R,
) -> Result<()> {
    if layer + 1 >= net.layers().len() {
        return Err(Error::InvalidId(format!(
            "layer {layer} is not a hidden layer"
        )));
    }
    let n = net.layer(layer).fan_out();
    if let Some(&bad) = idx.iter().find(|&&i| i >= n || i >= state.len()) {
        return Err(Error::InvalidId(format!("feature {bad} of layer {layer}")));
    }
    for &i in idx {
        let src = net.layer_mut(layer);
        let bound = src.init_bound();
        for j in 0..src.fan_in() {
            let w = draw_init_weight(bound, rng);
            src.set_weight(j, i, w);
        }
        src.biases_mut()[i] = 0.0;
        let dst = net.layer_mut(layer + 1);
        let fan_out = dst.fan_out();
        dst.weights_mut()[i * fan_out..(i + 1) * fan_out].fill(0.0);
        state.clear_feature(i);
        if let Some(st) = adam.as_deref_mut() {
            st.reset_feature(net, layer, i)?;
        }
    }
    Ok(())
}

/// Generate-and-test engine bound to one learner.
#[derive(Debug, Clone)]
pub struct Gnt {
    pub cfg: GntConfig,
    pub state: GntState,
    rng: StreamRng,
    in_mag: Vec<f64>,
    out_mag: Vec<f64>,
    replaced_total: u64,
}

impl Gnt {
    pub fn new(net: &Network, cfg: GntConfig, rng: StreamRng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: GntState::new(net),
            rng,
            in_mag: Vec::new(),
            out_mag: Vec::new(),
            replaced_total: 0,
        })
    }

    pub fn replaced_total(&self) -> u64 {
        self.replaced_total
    }

    /// Updates utilities from `trace` and replaces low-utility features in
    /// every hidden layer, first to last. Returns the number replaced.
    pub fn update_and_replace(
        &mut self,
        net: &mut Network,
        trace: &ForwardTrace,
        mut adam: Option<&mut AdamState>,
    ) -> Result<usize> {
        if self.state.layers.len() != net.num_hidden_layers() {
            return Err(Error::Shape("tester state does not match network".into()));
        }
        let mut replaced = 0;
        for l in 0..self.state.layers.len() {
            self.update_layer(net, trace, l)?;
            let idx = select_replacements(&mut self.state.layers[l], &self.cfg);
            if !idx.is_empty() {
                replace_features(
                    net,
                    adam.as_deref_mut(),
                    &mut self.state.layers[l],
                    l,
                    &idx,
                    &mut self.rng,
                )?;
                replaced += idx.len();
            }
        }
        self.replaced_total += replaced as u64;
        Ok(replaced)
    }

    fn update_layer(&mut self, net: &Network, trace: &ForwardTrace, l: usize) -> Result<()> {
        let kind = self.cfg.utility;
        let decay = self.cfg.decay_rate;
        let n = net.layer(l).fan_out();
        let h = trace
            .post
            .get(l)
            .filter(|h| h.len() == n)
            .ok_or_else(|| Error::Shape(format!("trace has no hidden layer {l}")))?;
        if kind.needs_outgoing() {
            self.out_mag.resize(n, 0.0);
            net.layer(l + 1).outgoing_magnitudes(&mut self.out_mag);
        }
        if kind.needs_incoming() {
            self.in_mag.resize(n, 0.0);
            net.layer(l).incoming_magnitudes(&mut self.in_mag);
        }

        let st = &mut self.state.layers[l];
        for a in st.age.iter_mut() {
            *a += 1;
        }
        for i in 0..n {
            let age = st.age[i];
            match kind {
                UtilityKind::Random => {
                    st.utility[i] = update_random_utility(&mut self.rng);
                    st.score[i] = st.utility[i];
                }
                UtilityKind::WeightMagnitude => {
                    st.utility[i] = update_weight_magnitude(st.utility[i], self.out_mag[i], decay);
                    st.score[i] = st.utility[i];
                }
                UtilityKind::Contribution => {
                    st.utility[i] =
                        update_contribution(st.utility[i], h[i], self.out_mag[i], decay);
                    st.score[i] = st.utility[i];
                }
                UtilityKind::MeanCorrectedContribution => {
                    let (z, f) = update_mean_corrected(
                        st.utility[i],
                        st.mean_act[i],
                        h[i],
                        self.out_mag[i],
                        decay,
                        age,
                    );
                    st.utility[i] = z;
                    st.mean_act[i] = f;
                    st.score[i] = z;
                }
                UtilityKind::Adaptation => {
                    st.utility[i] = update_adaptation(st.utility[i], self.in_mag[i], decay);
                    st.score[i] = st.utility[i];
                }
                UtilityKind::Overall => {
                    let (u, f, u_hat) = update_overall(
                        st.utility[i],
                        st.mean_act[i],
                        h[i],
                        self.in_mag[i],
                        self.out_mag[i],
                        decay,
                        age,
                    );
                    st.utility[i] = u;
                    st.mean_act[i] = f;
                    st.score[i] = u_hat;
                }
            }
        }
        Ok(())
    }
}

/// One continual-backprop step: an optimizer update with `grads`, then a
/// generate-and-test pass using the activations in `trace`.
pub fn cbp_step(
    net: &mut Network,
    trace: &ForwardTrace,
    grads: &Gradients,
    optimizer: &mut Optimizer,
    gnt: &mut Gnt,
) -> Result<usize> {
    optimizer.step(net, grads)?;
    gnt.update_and_replace(net, trace, optimizer.adam_state_mut())
}
