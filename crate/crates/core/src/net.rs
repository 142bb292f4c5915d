//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Weights of a layer are stored row-major with shape `(fan_in, fan_out)`:
//! row `j` holds the weights leaving input `j`, so the outgoing weights of a
//! hidden feature are one contiguous row of the next layer, and its incoming
//! weights are one column of its own layer.
//!
//! All arithmetic is `f64`.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Element-wise nonlinearity of a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Elu {
        alpha: f64,
    },
    /// `z * sigmoid(z)`.
    Swish,
    /// Linear threshold unit: `1` if `z > threshold[k]`, else `0`.
    /// Only used by target networks; it has no useful derivative.
    Ltu {
        thresholds: Vec<f64>,
    },
    Linear,
}

impl Activation {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
    pub const DEFAULT_ELU_ALPHA: f64 = 1.0;

    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            slope: Self::DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn elu() -> Self {
        Activation::Elu {
            alpha: Self::DEFAULT_ELU_ALPHA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::LeakyRelu { .. } => "leaky_relu",
            Activation::Elu { .. } => "elu",
            Activation::Swish => "swish",
            Activation::Ltu { .. } => "ltu",
            Activation::Linear => "linear",
        }
    }

    /// Parses a learner activation name (`linear` included).
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "relu" => Activation::Relu,
            "leaky_relu" => Activation::leaky_relu(),
            "elu" => Activation::elu(),
            "swish" => Activation::Swish,
            "linear" => Activation::Linear,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown activation {other:?}"
                )))
            }
        })
    }

    #[inline]
    fn scalar(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Elu { alpha } => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z.exp_m1()
                }
            }
            Activation::Swish => z * sigmoid(z),
            Activation::Linear => z,
            Activation::Ltu { .. } => unreachable!("ltu is applied per unit"),
        }
    }

    /// Applies the activation to a whole layer of pre-activations.
    pub fn apply(&self, pre: &[f64], post: &mut [f64]) {
        debug_assert_eq!(pre.len(), post.len());
        match self {
            Activation::Ltu { thresholds } => {
                for ((h, &z), &theta) in post.iter_mut().zip(pre).zip(thresholds) {
                    *h = if z > theta { 1.0 } else { 0.0 };
                }
            }
            Activation::Linear => post.copy_from_slice(pre),
            _ => {
                for (h, &z) in post.iter_mut().zip(pre) {
                    *h = self.scalar(z);
                }
            }
        }
    }

    /// Multiplies `delta` in place by the activation derivative at `pre`.
    pub fn backprop(&self, pre: &[f64], post: &[f64], delta: &mut [f64]) -> Result<()> {
        match self {
            Activation::Linear => {}
            Activation::Tanh => {
                for (d, &h) in delta.iter_mut().zip(post) {
                    *d *= 1.0 - h * h;
                }
            }
            Activation::Sigmoid => {
                for (d, &h) in delta.iter_mut().zip(post) {
                    *d *= h * (1.0 - h);
                }
            }
            Activation::Relu => {
                for (d, &z) in delta.iter_mut().zip(pre) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            Activation::LeakyRelu { slope } => {
                for (d, &z) in delta.iter_mut().zip(pre) {
                    if z <= 0.0 {
                        *d *= slope;
                    }
                }
            }
            Activation::Elu { alpha } => {
                for ((d, &z), &h) in delta.iter_mut().zip(pre).zip(post) {
                    if z <= 0.0 {
                        *d *= h + alpha;
                    }
                }
            }
            Activation::Swish => {
                for (d, &z) in delta.iter_mut().zip(pre) {
                    let s = sigmoid(z);
                    *d *= s + z * s * (1.0 - s);
                }
            }
            Activation::Ltu { .. } => return Err(Error::NonDifferentiable("ltu")),
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Kaiming gain keeping activation magnitudes stable across layers.
///
/// LTU and linear layers use gain 1.
pub fn gain_for(act: &Activation) -> f64 {
    match act {
        Activation::Tanh => 5.0 / 3.0,
        Activation::Sigmoid => 1.0,
        Activation::Relu | Activation::Elu { .. } | Activation::Swish => 2f64.sqrt(),
        Activation::LeakyRelu { slope } => (2.0 / (1.0 + slope * slope)).sqrt(),
        Activation::Ltu { .. } | Activation::Linear => 1.0,
    }
}

/// Bound `b` of the uniform Kaiming distribution `U(-b, b)`.
pub fn kaiming_bound(gain: f64, fan_in: usize) -> f64 {
    gain * (3.0 / fan_in as f64).sqrt()
}

/// Draws one weight from `U(-bound, bound)`, excluding both endpoints.
pub fn draw_init_weight<R: Rng + ?Sized>(bound: f64, rng: &mut R) -> f64 {
    if bound == 0.0 {
        return 0.0;
    }
    let dist = Uniform::new(-bound, bound);
    loop {
        let w = dist.sample(rng);
        if w != -bound {
            return w;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    fan_in: usize,
    fan_out: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
    init_bound: f64,
}

impl Layer {
    /// Builds a layer from explicit parameters. `weights` is `(fan_in, fan_out)` row-major.
    pub fn from_parts(
        fan_in: usize,
        fan_out: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
        init_bound: f64,
    ) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::InvalidConfig("layer widths must be > 0".into()));
        }
        if weights.len() != fan_in * fan_out || biases.len() != fan_out {
            return Err(Error::Shape(format!(
                "layer {fan_in}x{fan_out} got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        if let Activation::Ltu { thresholds } = &activation {
            if thresholds.len() != fan_out {
                return Err(Error::Shape(format!(
                    "{} ltu thresholds for {fan_out} units",
                    thresholds.len()
                )));
            }
        }
        if weights.iter().chain(&biases).any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Self {
            fan_in,
            fan_out,
            weights,
            biases,
            activation,
            init_bound,
        })
    }

    /// Samples a layer from the uniform Kaiming distribution, biases zero.
    pub fn kaiming<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::InvalidConfig("layer widths must be > 0".into()));
        }
        let bound = kaiming_bound(gain_for(&activation), fan_in);
        let weights = (0..fan_in * fan_out)
            .map(|_| draw_init_weight(bound, rng))
            .collect();
        Self::from_parts(
            fan_in,
            fan_out,
            weights,
            vec![0.0; fan_out],
            activation,
            bound,
        )
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    /// Bound of the distribution this layer's weights were drawn from.
    pub fn init_bound(&self) -> f64 {
        self.init_bound
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    #[inline]
    pub fn weight(&self, input: usize, unit: usize) -> f64 {
        self.weights[input * self.fan_out + unit]
    }

    #[inline]
    pub fn set_weight(&mut self, input: usize, unit: usize, w: f64) {
        self.weights[input * self.fan_out + unit] = w;
    }

    /// Weights leaving input `j` (one row).
    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.fan_out..(j + 1) * self.fan_out]
    }

    /// Weights entering unit `k` (one column).
    pub fn column(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().skip(k).step_by(self.fan_out).copied()
    }

    /// `Σ_j |w_jk|` for every unit `k`, written into `out`.
    pub fn incoming_magnitudes(&self, out: &mut [f64]) {
        out.fill(0.0);
        for row in self.weights.chunks_exact(self.fan_out) {
            for (acc, w) in out.iter_mut().zip(row) {
                *acc += w.abs();
            }
        }
    }

    /// `Σ_k |w_jk|` for every input `j`.
    pub fn outgoing_magnitudes(&self, out: &mut [f64]) {
        for (acc, row) in out.iter_mut().zip(self.weights.chunks_exact(self.fan_out)) {
            *acc = row.iter().map(|w| w.abs()).sum();
        }
    }

    pub fn mean_abs_weight(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum::<f64>() / self.weights.len() as f64
    }

    fn forward_into(&self, input: &[f64], pre: &mut [f64], post: &mut [f64]) {
        pre.copy_from_slice(&self.biases);
        for (&x, row) in input.iter().zip(self.weights.chunks_exact(self.fan_out)) {
            if x == 0.0 {
                continue;
            }
            for (z, w) in pre.iter_mut().zip(row) {
                *z += x * w;
            }
        }
        self.activation.apply(pre, post);
    }
}

/// A stack of dense layers; the last one is the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Pre- and post-activations recorded by a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Activations `h` of the `l`-th hidden layer.
    pub fn hidden(&self, l: usize) -> &[f64] {
        &self.post[l]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    /// Weight rows that may be non-zero; every other row is exactly zero.
    /// `None` means unknown. Maintained by [`Network::backward_into`] so
    /// that sparse inputs cost time proportional to their non-zeros.
    pub(crate) active_rows: Option<Vec<usize>>,
}

impl LayerGrad {
    pub fn new(weights: Vec<f64>, biases: Vec<f64>) -> Self {
        Self {
            weights,
            biases,
            active_rows: None,
        }
    }

    /// Rows of `weights` that may hold non-zero values, if known.
    pub fn active_rows(&self) -> Option<&[usize]> {
        self.active_rows.as_deref()
    }

    /// Forgets row sparsity; call after writing to `weights` by hand.
    pub fn mark_dense(&mut self) {
        self.active_rows = None;
    }
}

/// Loss gradients with the same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                    active_rows: None,
                })
                .collect(),
        }
    }

    pub(crate) fn matches(&self, net: &Network) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weights.len() == l.weights.len() && g.biases.len() == l.biases.len()
            })
    }
}

impl Network {
    /// Builds a network from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig(
                "network needs at least one layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::Shape(format!(
                    "layer with {} outputs feeds layer with {} inputs",
                    pair[0].fan_out, pair[1].fan_in
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Kaiming-initialized learner. `acts` holds one activation per layer
    /// (the last is normally [`Activation::Linear`]).
    pub fn kaiming<R: Rng + ?Sized>(
        widths: &[usize],
        acts: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidConfig(
                "need at least input and output widths".into(),
            ));
        }
        if acts.len() != widths.len() - 1 {
            return Err(Error::InvalidConfig(format!(
                "{} activations for {} layers",
                acts.len(),
                widths.len() - 1
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be > 0".into()));
        }
        if acts.iter().any(|a| matches!(a, Activation::Ltu { .. })) {
            return Err(Error::InvalidConfig(
                "ltu is reserved for target networks".into(),
            ));
        }
        let layers = widths
            .windows(2)
            .zip(acts)
            .map(|(w, act)| Layer::kaiming(w[0], w[1], act.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Layer {
        &mut self.layers[l]
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn output_layer(&self) -> &Layer {
        &self.layers[self.layers.len() - 1]
    }

    /// An empty trace with buffers sized for this network.
    pub fn new_trace(&self) -> ForwardTrace {
        ForwardTrace {
            input: vec![0.0; self.input_width()],
            pre: self.layers.iter().map(|l| vec![0.0; l.fan_out]).collect(),
            post: self.layers.iter().map(|l| vec![0.0; l.fan_out]).collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        let mut trace = self.new_trace();
        self.forward_into(x, &mut trace)?;
        Ok(trace)
    }

    /// Forward pass reusing the buffers of `trace`.
    pub fn forward_into(&self, x: &[f64], trace: &mut ForwardTrace) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::Shape(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input_width()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        if trace.pre.len() != self.layers.len() {
            *trace = self.new_trace();
        }
        trace.input.clear();
        trace.input.extend_from_slice(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let (done, rest) = trace.post.split_at_mut(l);
            let input = if l == 0 {
                &trace.input[..]
            } else {
                &done[l - 1][..]
            };
            let pre = &mut trace.pre[l];
            let post = &mut rest[0];
            pre.resize(layer.fan_out, 0.0);
            post.resize(layer.fan_out, 0.0);
            layer.forward_into(input, pre, post);
        }
        Ok(())
    }

    pub fn backward(&self, trace: &ForwardTrace, loss_grad: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        let mut scratch = Vec::new();
        self.backward_into(trace, loss_grad, &mut grads, &mut scratch)?;
        Ok(grads)
    }

    /// Backward pass writing into `grads`. `loss_grad` is `dLoss/dOutput`;
    /// `scratch` is reused between calls.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        loss_grad: &[f64],
        grads: &mut Gradients,
        scratch: &mut Vec<f64>,
    ) -> Result<()> {
        if loss_grad.len() != self.output_width() {
            return Err(Error::Shape(format!(
                "loss gradient has {} values, network has {} outputs",
                loss_grad.len(),
                self.output_width()
            )));
        }
        if trace.pre.len() != self.layers.len()
            || trace.input.len() != self.input_width()
            || trace
                .pre
                .iter()
                .zip(&self.layers)
                .any(|(p, l)| p.len() != l.fan_out)
        {
            return Err(Error::Shape("trace does not match network".into()));
        }
        if !grads.matches(self) {
            *grads = Gradients::zeros_like(self);
        }

        let last = self.layers.len() - 1;
        let mut delta = loss_grad.to_vec();
        self.layers[last]
            .activation
            .backprop(&trace.pre[last], &trace.post[last], &mut delta)?;

        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 {
                &trace.input
            } else {
                &trace.post[l - 1]
            };
            let g = &mut grads.layers[l];
            g.biases.copy_from_slice(&delta);
            let n = layer.fan_out;
            let mut active = g.active_rows.take();
            match &mut active {
                Some(rows) => {
                    // Only rows that were non-zero can need clearing.
                    for &j in rows.iter() {
                        if input[j] == 0.0 {
                            g.weights[j * n..(j + 1) * n].fill(0.0);
                        }
                    }
                    rows.clear();
                }
                None => g.weights.fill(0.0),
            }
            let rows = active.get_or_insert_with(Vec::new);
            for (j, &x) in input.iter().enumerate() {
                if x != 0.0 {
                    rows.push(j);
                    for (gw, d) in g.weights[j * n..(j + 1) * n].iter_mut().zip(&delta) {
                        *gw = x * d;
                    }
                }
            }
            g.active_rows = active;
            if l > 0 {
                scratch.clear();
                scratch.extend(
                    layer
                        .weights
                        .chunks_exact(layer.fan_out)
                        .map(|row| row.iter().zip(&delta).map(|(w, d)| w * d).sum::<f64>()),
                );
                let below = &self.layers[l - 1];
                below
                    .activation
                    .backprop(&trace.pre[l - 1], &trace.post[l - 1], scratch)?;
                std::mem::swap(&mut delta, scratch);
            }
        }
        Ok(())
    }
}

/// Kaiming-initialized learner whose randomness comes only from `seed`.
pub fn init_network(widths: &[usize], acts: &[Activation], seed: u64) -> Result<Network> {
    let mut rng = rng::stream(seed, Stream::LearnerInit);
    Network::kaiming(widths, acts, &mut rng)
}

/// LTU threshold `θ = |v|·β − S` where `S` counts the `-1` weights.
///
/// `v` includes the constant bias input, so `|v| = m + 1`.
pub fn ltu_threshold(v: &[f64], beta: f64) -> Result<f64> {
    let mut negatives = 0usize;
    for &w in v {
        if w == -1.0 {
            negatives += 1;
        } else if w != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "ltu weights must be ±1, got {w}"
            )));
        }
    }
    Ok(v.len() as f64 * beta - negatives as f64)
}

/// `1` iff `v·x > theta` (strict).
pub fn ltu_output(v: &[f64], theta: f64, x: &[f64]) -> Result<u8> {
    if v.len() != x.len() {
        return Err(Error::Shape(format!(
            "ltu has {} weights but input has {} values",
            v.len(),
            x.len()
        )));
    }
    let dot: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
    Ok(u8::from(dot > theta))
}
