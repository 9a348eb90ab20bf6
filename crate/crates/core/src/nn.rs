//! Dense feedforward networks with the three derivatives the schemes need:
//! value, input Jacobian and parameter gradient, plus an Adam optimizer.
//!
//! # Parameter layout
//!
//! Parameters live in one flat `Vec<f64>`, layer by layer. For a layer with
//! `fan_in` inputs and `fan_out` outputs the block is the row-major weight
//! matrix (`fan_out × fan_in`) followed by the `fan_out` biases. Hidden layers
//! apply the activation; the output layer is affine.
//!
//! Per-sample evaluation reuses a [`ForwardCache`] so the training hot path does
//! not allocate.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input has length {got}, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("output gradient has length {got}, network produces {expected}")]
    OutputDim { expected: usize, got: usize },
    #[error("parameter vector has length {got}, layout requires {expected}")]
    ParamLen { expected: usize, got: usize },
    #[error("network dimensions must be positive")]
    EmptyLayer,
    #[error("non-finite gradient at optimizer step {step}")]
    Divergence { step: u64 },
    #[error("input normalization needs finite centers and positive scales")]
    Normalization,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// First derivative written in terms of the activated value `a = φ(z)`.
    /// The relu subgradient at 0 is 0.
    #[inline]
    fn d1(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    fn d2(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Relu => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerShape {
    #[inline]
    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    #[inline]
    fn biases<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.fan_in * self.fan_out;
        &params[start..start + self.fan_out]
    }

    #[inline]
    fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

fn layer_shapes(input_dim: usize, output_dim: usize, hidden: &[usize]) -> Vec<LayerShape> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(output_dim);
    let mut offset = 0;
    dims.windows(2)
        .map(|w| {
            let shape = LayerShape {
                fan_in: w[0],
                fan_out: w[1],
                offset,
            };
            offset += shape.len();
            shape
        })
        .collect()
}

/// Number of parameters of a network with the given layer widths.
pub fn param_count(input_dim: usize, output_dim: usize, hidden: &[usize]) -> usize {
    layer_shapes(input_dim, output_dim, hidden)
        .iter()
        .map(LayerShape::len)
        .sum()
}

/// Multilayer perceptron `ℝ^input_dim → ℝ^output_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetCheckpoint", into = "NetCheckpoint")]
pub struct FeedforwardNet {
    input_dim: usize,
    output_dim: usize,
    hidden_widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    layers: Vec<LayerShape>,
    /// Fixed input standardization `(x − center) / scale`, not trained.
    input_center: Vec<f64>,
    input_scale: Vec<f64>,
}

impl FeedforwardNet {
    /// Network with every parameter set to zero.
    pub fn zeros(
        input_dim: usize,
        output_dim: usize,
        hidden_widths: &[usize],
        activation: Activation,
    ) -> Result<Self, NnError> {
        let n = param_count(input_dim, output_dim, hidden_widths);
        Self::from_params(input_dim, output_dim, hidden_widths, activation, vec![0.0; n])
    }

    pub fn from_params(
        input_dim: usize,
        output_dim: usize,
        hidden_widths: &[usize],
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self, NnError> {
        if input_dim == 0 || output_dim == 0 || hidden_widths.contains(&0) {
            return Err(NnError::EmptyLayer);
        }
        let layers = layer_shapes(input_dim, output_dim, hidden_widths);
        let expected: usize = layers.iter().map(LayerShape::len).sum();
        if params.len() != expected {
            return Err(NnError::ParamLen {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            input_dim,
            output_dim,
            hidden_widths: hidden_widths.to_vec(),
            activation,
            params,
            layers,
            input_center: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
        })
    }

    /// Uniform Glorot initialization, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        input_dim: usize,
        output_dim: usize,
        hidden_widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut net = Self::zeros(input_dim, output_dim, hidden_widths, activation)?;
        for layer in net.layers.clone() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let w = &mut net.params[layer.offset..layer.offset + layer.fan_in * layer.fan_out];
            for v in w {
                *v = rng.gen_range(-limit..limit);
            }
        }
        Ok(net)
    }

    /// Sets the fixed input map `x ↦ (x − center) / scale`.
    pub fn set_input_normalization(&mut self, center: &[f64], scale: &[f64]) -> Result<(), NnError> {
        if center.len() != self.input_dim || scale.len() != self.input_dim {
            return Err(NnError::InputDim {
                expected: self.input_dim,
                got: center.len().min(scale.len()),
            });
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) || center.iter().any(|c| !c.is_finite()) {
            return Err(NnError::Normalization);
        }
        self.input_center = center.to_vec();
        self.input_scale = scale.to_vec();
        Ok(())
    }

    /// Overwrites the output-layer biases.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<(), NnError> {
        self.check_output(bias)?;
        let n = self.params.len();
        self.params[n - self.output_dim..].copy_from_slice(bias);
        Ok(())
    }

    pub fn input_normalization(&self) -> (&[f64], &[f64]) {
        (&self.input_center, &self.input_scale)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.input_dim {
            return Err(NnError::InputDim {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_output(&self, g: &[f64]) -> Result<(), NnError> {
        if g.len() != self.output_dim {
            return Err(NnError::OutputDim {
                expected: self.output_dim,
                got: g.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        let mut cache = ForwardCache::new(self);
        Ok(self.forward(x, &mut cache).to_vec())
    }

    /// Jacobian of the output with respect to the input, row-major
    /// (`output_dim × input_dim`).
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        let mut cache = ForwardCache::new(self);
        let mut jac = vec![0.0; self.output_dim * self.input_dim];
        self.forward(x, &mut cache);
        self.jacobian_from_cache(&mut cache, &mut jac);
        Ok(jac)
    }

    /// Gradient of `⟨loss_grad_at_output, net(x)⟩` with respect to the parameters.
    pub fn param_gradient(&self, loss_grad_at_output: &[f64], x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        self.check_output(loss_grad_at_output)?;
        let mut cache = ForwardCache::new(self);
        let mut grad = vec![0.0; self.params.len()];
        self.forward(x, &mut cache);
        self.backward(&mut cache, loss_grad_at_output, Some(&mut grad), None);
        Ok(grad)
    }

    /// Evaluates the network into `cache` and returns the output slice.
    /// Panics on a dimension mismatch; checked entry points are [`Self::eval`] and friends.
    #[inline]
    pub fn forward<'c>(&self, x: &[f64], cache: &'c mut ForwardCache) -> &'c [f64] {
        assert_eq!(x.len(), self.input_dim, "network input dimension");
        if !cache.matches(self) {
            *cache = ForwardCache::new(self);
        }
        self.normalize(x, &mut cache.acts[0]);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = cache.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            let w = layer.weights(&self.params);
            let b = layer.biases(&self.params);
            for (o, row) in out.iter_mut().zip(w.chunks_exact(layer.fan_in)) {
                let mut s = 0.0;
                for (wi, xi) in row.iter().zip(input.iter()) {
                    s += wi * xi;
                }
                *o = s;
            }
            for (o, bi) in out.iter_mut().zip(b) {
                *o += bi;
            }
            if l != last {
                for o in out.iter_mut() {
                    *o = self.activation.apply(*o);
                }
            }
        }
        &cache.acts[self.layers.len()]
    }

    #[inline]
    fn normalize(&self, x: &[f64], out: &mut [f64]) {
        for (((o, xi), c), s) in out.iter_mut().zip(x).zip(&self.input_center).zip(&self.input_scale) {
            *o = (xi - c) / s;
        }
    }

    /// Reverse pass after [`Self::forward`] on the same cache. Accumulates
    /// (adds) into `param_grad` and overwrites `input_grad`.
    pub fn backward(
        &self,
        cache: &mut ForwardCache,
        dout: &[f64],
        mut param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        let n = self.layers.len();
        cache.delta[n].copy_from_slice(dout);
        for l in (0..n).rev() {
            let layer = self.layers[l];
            let w = layer.weights(&self.params);
            {
                let delta = &cache.delta[l + 1];
                let input = &cache.acts[l];
                if let Some(g) = param_grad.as_deref_mut() {
                    let (gw, gb) = g[layer.offset..layer.offset + layer.len()]
                        .split_at_mut(layer.fan_in * layer.fan_out);
                    for ((grow, &d), gbi) in gw.chunks_exact_mut(layer.fan_in).zip(delta).zip(gb) {
                        if d != 0.0 {
                            for (gi, xi) in grow.iter_mut().zip(input) {
                                *gi += d * xi;
                            }
                        }
                        *gbi += d;
                    }
                }
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            let (lower, upper) = cache.delta.split_at_mut(l + 1);
            let prev = &mut lower[l];
            let delta = &upper[0];
            prev.iter_mut().for_each(|p| *p = 0.0);
            for (row, &d) in w.chunks_exact(layer.fan_in).zip(delta) {
                if d != 0.0 {
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += d * wi;
                    }
                }
            }
            if l > 0 {
                for (p, &a) in prev.iter_mut().zip(&cache.acts[l]) {
                    *p *= self.activation.d1(a);
                }
            }
        }
        if let Some(ig) = input_grad {
            for ((g, d), s) in ig.iter_mut().zip(&cache.delta[0]).zip(&self.input_scale) {
                *g = d / s;
            }
        }
    }

    /// Input Jacobian for the point last passed to [`Self::forward`] on `cache`.
    pub fn jacobian_from_cache(&self, cache: &mut ForwardCache, jac: &mut [f64]) {
        let mut unit = vec![0.0; self.output_dim];
        for (k, row) in jac.chunks_exact_mut(self.input_dim).enumerate() {
            unit.iter_mut().for_each(|u| *u = 0.0);
            unit[k] = 1.0;
            self.backward(cache, &unit, None, Some(row));
        }
    }

    /// Forward pass carrying a tangent: returns `(net(x), J(x)·direction)`.
    pub fn forward_tangent<'c>(
        &self,
        x: &[f64],
        direction: &[f64],
        cache: &'c mut TangentCache,
    ) -> (&'c [f64], &'c [f64]) {
        assert_eq!(x.len(), self.input_dim, "network input dimension");
        assert_eq!(direction.len(), self.input_dim, "tangent dimension");
        self.normalize(x, &mut cache.acts[0]);
        for ((t, d), s) in cache.tangents[0].iter_mut().zip(direction).zip(&self.input_scale) {
            *t = d / s;
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = layer.weights(&self.params);
            let b = layer.biases(&self.params);
            let (ah, at) = cache.acts.split_at_mut(l + 1);
            let (th, tt) = cache.tangents.split_at_mut(l + 1);
            let (input, tin) = (&ah[l], &th[l]);
            let (out, tout) = (&mut at[0], &mut tt[0]);
            for (k, row) in w.chunks_exact(layer.fan_in).enumerate() {
                let mut s = b[k];
                let mut ts = 0.0;
                for ((wi, xi), ti) in row.iter().zip(input).zip(tin) {
                    s += wi * xi;
                    ts += wi * ti;
                }
                cache.pre_tangents[l + 1][k] = ts;
                if l != last {
                    let a = self.activation.apply(s);
                    out[k] = a;
                    tout[k] = self.activation.d1(a) * ts;
                } else {
                    out[k] = s;
                    tout[k] = ts;
                }
            }
        }
        let n = self.layers.len();
        (&cache.acts[n], &cache.tangents[n])
    }

    /// Parameter gradient of `⟨g_value, y⟩ + ⟨g_tangent, ẏ⟩` where `(y, ẏ)` came
    /// from [`Self::forward_tangent`] on the same cache. Accumulates into `param_grad`.
    pub fn backward_tangent(
        &self,
        cache: &mut TangentCache,
        g_value: &[f64],
        g_tangent: &[f64],
        param_grad: &mut [f64],
    ) {
        let n = self.layers.len();
        cache.delta[n].copy_from_slice(g_value);
        cache.tdelta[n].copy_from_slice(g_tangent);
        for l in (0..n).rev() {
            let layer = self.layers[l];
            let w = layer.weights(&self.params);
            {
                let (d, td) = (&cache.delta[l + 1], &cache.tdelta[l + 1]);
                let (input, tin) = (&cache.acts[l], &cache.tangents[l]);
                let (gw, gb) = param_grad[layer.offset..layer.offset + layer.len()]
                    .split_at_mut(layer.fan_in * layer.fan_out);
                for (k, grow) in gw.chunks_exact_mut(layer.fan_in).enumerate() {
                    let (dk, tdk) = (d[k], td[k]);
                    for ((gi, xi), ti) in grow.iter_mut().zip(input).zip(tin) {
                        *gi += dk * xi + tdk * ti;
                    }
                    gb[k] += dk;
                }
            }
            if l == 0 {
                break;
            }
            let (dl, du) = cache.delta.split_at_mut(l + 1);
            let (tl, tu) = cache.tdelta.split_at_mut(l + 1);
            let (prev, tprev) = (&mut dl[l], &mut tl[l]);
            let (d, td) = (&du[0], &tu[0]);
            prev.iter_mut().for_each(|p| *p = 0.0);
            tprev.iter_mut().for_each(|p| *p = 0.0);
            for (k, row) in w.chunks_exact(layer.fan_in).enumerate() {
                for ((p, tp), wi) in prev.iter_mut().zip(tprev.iter_mut()).zip(row) {
                    *p += d[k] * wi;
                    *tp += td[k] * wi;
                }
            }
            // h = φ(z), ḣ = φ'(z) ż
            for ((p, tp), (&a, &zdot)) in prev
                .iter_mut()
                .zip(tprev.iter_mut())
                .zip(cache.acts[l].iter().zip(&cache.pre_tangents[l]))
            {
                let d1 = self.activation.d1(a);
                let d2 = self.activation.d2(a);
                *p = *p * d1 + *tp * d2 * zdot;
                *tp *= d1;
            }
        }
    }
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn new(net: &FeedforwardNet) -> Self {
        let mut dims = vec![net.input_dim];
        dims.extend(net.layers.iter().map(|l| l.fan_out));
        Self {
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            delta: dims.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    fn matches(&self, net: &FeedforwardNet) -> bool {
        self.acts.len() == net.layers.len() + 1
            && self.acts[0].len() == net.input_dim
            && net.layers.iter().zip(&self.acts[1..]).all(|(l, a)| l.fan_out == a.len())
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone)]
pub struct TangentCache {
    acts: Vec<Vec<f64>>,
    tangents: Vec<Vec<f64>>,
    pre_tangents: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    tdelta: Vec<Vec<f64>>,
}

impl TangentCache {
    pub fn new(net: &FeedforwardNet) -> Self {
        let mut dims = vec![net.input_dim];
        dims.extend(net.layers.iter().map(|l| l.fan_out));
        let mk = || dims.iter().map(|&d| vec![0.0; d]).collect::<Vec<_>>();
        Self {
            acts: mk(),
            tangents: mk(),
            pre_tangents: mk(),
            delta: mk(),
            tdelta: mk(),
        }
    }
}

/// Versioned on-disk form of a network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetCheckpoint {
    pub version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
    #[serde(default)]
    pub input_center: Vec<f64>,
    #[serde(default)]
    pub input_scale: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl From<FeedforwardNet> for NetCheckpoint {
    fn from(net: FeedforwardNet) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            input_dim: net.input_dim,
            output_dim: net.output_dim,
            hidden_widths: net.hidden_widths,
            activation: net.activation,
            params: net.params,
            input_center: net.input_center,
            input_scale: net.input_scale,
        }
    }
}

impl TryFrom<NetCheckpoint> for FeedforwardNet {
    type Error = NnError;

    fn try_from(c: NetCheckpoint) -> Result<Self, Self::Error> {
        if c.version != CHECKPOINT_VERSION {
            return Err(NnError::Version(c.version));
        }
        let mut net = FeedforwardNet::from_params(c.input_dim, c.output_dim, &c.hidden_widths, c.activation, c.params)?;
        if !c.input_center.is_empty() || !c.input_scale.is_empty() {
            net.set_input_normalization(&c.input_center, &c.input_scale)?;
        }
        Ok(net)
    }
}

/// Piecewise-constant learning rate indexed by the optimizer step count (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    /// `rates[k]` applies to steps `boundaries[k-1] < step <= boundaries[k]`;
    /// the last rate applies beyond the last boundary.
    pub boundaries: Vec<u64>,
    pub rates: Vec<f64>,
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self {
            boundaries: Vec::new(),
            rates: vec![rate],
        }
    }

    /// `pieces` equal-length plateaus spanning `budget` steps, decaying
    /// geometrically from `start` to `end`.
    pub fn geometric(start: f64, end: f64, pieces: usize, budget: u64) -> Self {
        let pieces = pieces.max(1);
        if pieces == 1 {
            return Self::constant(start);
        }
        let ratio = (end / start).powf(1.0 / (pieces - 1) as f64);
        let rates = (0..pieces).map(|k| start * ratio.powi(k as i32)).collect();
        let boundaries = (1..pieces)
            .map(|k| (budget as f64 * k as f64 / pieces as f64).round() as u64)
            .collect();
        Self { boundaries, rates }
    }

    pub fn rate(&self, step: u64) -> f64 {
        let k = self.boundaries.iter().take_while(|&&b| step > b).count();
        self.rates[k.min(self.rates.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: LrSchedule,
}

impl AdamState {
    pub fn new(n_params: usize, schedule: LrSchedule) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<(), NnError> {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.first_moment.len());
    let step = state.step_count + 1;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(NnError::Divergence { step });
    }
    state.step_count = step;
    let lr = state.schedule.rate(step);
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Number of packed entries of a symmetric `d × d` matrix.
pub const fn sym_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Expands upper-triangular packed entries (row by row) into a full
/// row-major symmetric matrix.
pub fn sym_unpack(packed: &[f64], d: usize, out: &mut [f64]) {
    debug_assert_eq!(packed.len(), sym_len(d));
    let mut k = 0;
    for a in 0..d {
        for b in a..d {
            out[a * d + b] = packed[k];
            out[b * d + a] = packed[k];
            k += 1;
        }
    }
}

/// Upper triangle of a symmetric row-major matrix, row by row.
pub fn sym_pack(full: &[f64], d: usize, out: &mut [f64]) {
    let mut k = 0;
    for a in 0..d {
        for b in a..d {
            out[k] = 0.5 * (full[a * d + b] + full[b * d + a]);
            k += 1;
        }
    }
}

/// Chain rule through [`sym_unpack`]: gradient with respect to the packed
/// entries given the gradient with respect to the full matrix.
pub fn sym_pack_grad(full_grad: &[f64], d: usize, out: &mut [f64]) {
    let mut k = 0;
    for a in 0..d {
        for b in a..d {
            out[k] = if a == b {
                full_grad[a * d + a]
            } else {
                full_grad[a * d + b] + full_grad[b * d + a]
            };
            k += 1;
        }
    }
}
