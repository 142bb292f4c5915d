//! Per-example weight updates: SGD (optionally with L2) and Adam.
//!
//! Adam keeps a timestep per weight rather than one global counter, so a
//! weight whose state is reset by generate-and-test is bias-corrected exactly
//! like a freshly created weight.

use crate::net::{Gradients, Network};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub step_size: f64,
    /// L2 coefficient `λ`; zero gives plain SGD.
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(step_size: f64) -> Self {
        Self {
            step_size,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step size must be finite and > 0, got {}",
                self.step_size
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

fn check_shapes(net: &Network, grads: &Gradients) -> Result<()> {
    if grads.matches(net) {
        Ok(())
    } else {
        Err(Error::Shape("gradients do not match network".into()))
    }
}

const EXP_MASK: u64 = 0x7ff0_0000_0000_0000;

/// Has its top bit set iff `x` is infinite or NaN: an all-ones exponent
/// carries into bit 63. Only and/add, so loops that OR it together vectorize
/// even on baseline SSE2.
#[inline(always)]
fn non_finite_bits(x: f64) -> u64 {
    (x.to_bits() & EXP_MASK).wrapping_add(1 << 52)
}

/// `w ← w − α(g + λw)` for weights; biases take `b ← b − αg`.
pub fn sgd_step(net: &mut Network, grads: &Gradients, cfg: &SgdConfig) -> Result<()> {
    check_shapes(net, grads)?;
    let alpha = cfg.step_size;
    let lambda = cfg.weight_decay;
    for (l, (layer, g)) in net.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
        let mut bad = 0u64;
        if lambda == 0.0 {
            let n = layer.fan_out();
            let weights = layer.weights_mut();
            match g.active_rows() {
                // Rows outside the active set have zero gradient.
                Some(rows) => {
                    for &j in rows {
                        let r = j * n..(j + 1) * n;
                        for (w, gw) in weights[r.clone()].iter_mut().zip(&g.weights[r]) {
                            *w -= alpha * gw;
                            bad |= non_finite_bits(*w);
                        }
                    }
                }
                None => {
                    for (w, gw) in weights.iter_mut().zip(&g.weights) {
                        *w -= alpha * gw;
                        bad |= non_finite_bits(*w);
                    }
                }
            }
        } else {
            for (w, gw) in layer.weights_mut().iter_mut().zip(&g.weights) {
                *w -= alpha * (gw + lambda * *w);
                bad |= non_finite_bits(*w);
            }
        }
        for (b, gb) in layer.biases_mut().iter_mut().zip(&g.biases) {
            *b -= alpha * gb;
            bad |= non_finite_bits(*b);
        }
        if bad >> 63 != 0 {
            return Err(Error::NonFinite(format!("sgd update in layer {l}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(step_size: f64) -> Self {
        Self {
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        SgdConfig {
            step_size: self.step_size,
            weight_decay: self.weight_decay,
        }
        .validate()?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "eps must be > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Moments and timesteps for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: Vec<u64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: vec![0; n],
        }
    }

    #[inline]
    fn reset(&mut self, i: usize) {
        self.m[i] = 0.0;
        self.v[i] = 0.0;
        self.t[i] = 0;
    }

    fn len(&self) -> usize {
        self.m.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamLayerState {
    pub weights: Moments,
    pub biases: Moments,
}

/// Adam state for every parameter of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub layers: Vec<AdamLayerState>,
    corrections: CorrectionTable,
}

/// Identifies a single parameter of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    Weight {
        layer: usize,
        input: usize,
        unit: usize,
    },
    Bias {
        layer: usize,
        unit: usize,
    },
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| AdamLayerState {
                    weights: Moments::zeros(l.fan_in() * l.fan_out()),
                    biases: Moments::zeros(l.fan_out()),
                })
                .collect(),
            corrections: CorrectionTable::default(),
        }
    }

    fn matches(&self, net: &Network) -> bool {
        self.layers.len() == net.layers().len()
            && self.layers.iter().zip(net.layers()).all(|(s, l)| {
                s.weights.len() == l.weights().len() && s.biases.len() == l.biases().len()
            })
    }

    /// Zeroes `m`, `v` and `t` of the listed parameters.
    pub fn reset(&mut self, net: &Network, ids: &[ParamId]) -> Result<()> {
        // validate everything first so a bad id leaves the state untouched
        for id in ids {
            let ok = match *id {
                ParamId::Weight { layer, input, unit } => net
                    .layers()
                    .get(layer)
                    .is_some_and(|l| input < l.fan_in() && unit < l.fan_out()),
                ParamId::Bias { layer, unit } => {
                    net.layers().get(layer).is_some_and(|l| unit < l.fan_out())
                }
            };
            if !ok || !self.matches(net) {
                return Err(Error::InvalidId(format!("{id:?}")));
            }
        }
        for id in ids {
            match *id {
                ParamId::Weight { layer, input, unit } => {
                    let fan_out = net.layer(layer).fan_out();
                    self.layers[layer].weights.reset(input * fan_out + unit);
                }
                ParamId::Bias { layer, unit } => self.layers[layer].biases.reset(unit),
            }
        }
        Ok(())
    }

    /// Resets every weight touching hidden unit `unit` of layer `layer`:
    /// its incoming column and bias in `layer` and its outgoing row in
    /// `layer + 1`.
    pub fn reset_feature(&mut self, net: &Network, layer: usize, unit: usize) -> Result<()> {
        if layer + 1 >= net.layers().len() || unit >= net.layer(layer).fan_out() {
            return Err(Error::InvalidId(format!("feature {unit} of layer {layer}")));
        }
        let fan_out = net.layer(layer).fan_out();
        let st = &mut self.layers[layer];
        for j in 0..net.layer(layer).fan_in() {
            st.weights.reset(j * fan_out + unit);
        }
        st.biases.reset(unit);
        let next_out = net.layer(layer + 1).fan_out();
        let next = &mut self.layers[layer + 1].weights;
        for k in 0..next_out {
            next.reset(unit * next_out + k);
        }
        Ok(())
    }
}

/// Convenience wrapper: reset listed ids, see [`AdamState::reset`].
pub fn reset_weight_state(state: &mut AdamState, net: &Network, ids: &[ParamId]) -> Result<()> {
    state.reset(net, ids)
}

/// Longest bias-correction table kept; later timesteps fall back to `powi`.
const MAX_CORRECTION_TABLE: usize = 1 << 20;

/// Bias corrections `(1 − β1^t, 1 − β2^t)` tabulated by timestep. After
/// feature replacements a layer holds several distinct timesteps interleaved
/// along each row, so recomputing the powers per weight dominated the update.
/// Entries are exactly the `powi` values, and once both corrections round to
/// 1.0 they stay there, so the table stops growing.
#[derive(Debug, Clone, Default)]
struct CorrectionTable {
    betas: (f64, f64),
    table: Vec<(f64, f64)>,
    saturated: bool,
    last: (u64, f64, f64),
}

impl CorrectionTable {
    fn direct(beta1: f64, beta2: f64, t: u64) -> (f64, f64) {
        let e = t.min(i32::MAX as u64) as i32;
        (1.0 - beta1.powi(e), 1.0 - beta2.powi(e))
    }

    fn prepare(&mut self, beta1: f64, beta2: f64) {
        if self.betas != (beta1, beta2) {
            *self = Self {
                betas: (beta1, beta2),
                table: vec![(f64::NAN, f64::NAN)],
                saturated: false,
                last: (0, f64::NAN, f64::NAN),
            };
        }
    }

    /// Neighbouring weights usually share a timestep, so the last lookup is
    /// checked first.
    #[inline]
    fn get(&mut self, t: u64) -> (f64, f64) {
        if t == self.last.0 {
            return (self.last.1, self.last.2);
        }
        let c = self.lookup(t);
        self.last = (t, c.0, c.1);
        c
    }

    #[inline(never)]
    fn lookup(&mut self, t: u64) -> (f64, f64) {
        let (b1, b2) = self.betas;
        if let Some(&c) = self.table.get(t as usize) {
            return c;
        }
        if self.saturated {
            return (1.0, 1.0);
        }
        while self.table.len() <= t as usize && self.table.len() < MAX_CORRECTION_TABLE {
            let c = Self::direct(b1, b2, self.table.len() as u64);
            self.table.push(c);
            if c == (1.0, 1.0) {
                self.saturated = true;
                return c;
            }
        }
        self.table
            .get(t as usize)
            .copied()
            .unwrap_or_else(|| Self::direct(b1, b2, t))
    }
}

/// The table is a cache, so it never affects equality.
impl PartialEq for CorrectionTable {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Moments of weights whose gradient stays at zero decay geometrically and,
/// under round-to-nearest, get stuck at the smallest subnormal instead of
/// reaching zero. Arithmetic on subnormals is very slow on x86, so they are
/// flushed; the effect on any update is below 1e-300.
#[inline]
fn flush_subnormal(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

fn adam_tensor(
    params: &mut [f64],
    grads: &[f64],
    st: &mut Moments,
    cfg: &AdamConfig,
    decay: f64,
    corr: &mut CorrectionTable,
) -> bool {
    let mut finite = true;
    for i in 0..params.len() {
        let g = grads[i] + decay * params[i];
        let t = st.t[i] + 1;
        st.t[i] = t;
        let m = flush_subnormal(cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g);
        let v = flush_subnormal(cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g);
        st.m[i] = m;
        st.v[i] = v;
        let (c1, c2) = corr.get(t);
        params[i] -= cfg.step_size * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        finite &= params[i].is_finite();
    }
    finite
}

/// One Adam update with per-weight bias correction.
pub fn adam_step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    check_shapes(net, grads)?;
    if !state.matches(net) {
        return Err(Error::Shape("adam state does not match network".into()));
    }
    let corr = &mut state.corrections;
    corr.prepare(cfg.beta1, cfg.beta2);
    for (l, ((layer, g), st)) in net
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.layers)
        .enumerate()
    {
        let ok_w = adam_tensor(
            layer.weights_mut(),
            &g.weights,
            &mut st.weights,
            cfg,
            cfg.weight_decay,
            corr,
        );
        let ok_b = adam_tensor(
            layer.biases_mut(),
            &g.biases,
            &mut st.biases,
            cfg,
            0.0,
            corr,
        );
        if !(ok_w && ok_b) {
            return Err(Error::NonFinite(format!("adam update in layer {l}")));
        }
    }
    Ok(())
}

/// The optimizer driving a learner.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(SgdConfig),
    Adam { cfg: AdamConfig, state: AdamState },
}

impl Optimizer {
    pub fn sgd(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer::Sgd(cfg))
    }

    pub fn adam(cfg: AdamConfig, net: &Network) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer::Adam {
            cfg,
            state: AdamState::new(net),
        })
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        match self {
            Optimizer::Sgd(cfg) => sgd_step(net, grads, cfg),
            Optimizer::Adam { cfg, state } => adam_step(net, grads, state, cfg),
        }
    }

    pub fn adam_state_mut(&mut self) -> Option<&mut AdamState> {
        match self {
            Optimizer::Sgd(_) => None,
            Optimizer::Adam { state, .. } => Some(state),
        }
    }
}
