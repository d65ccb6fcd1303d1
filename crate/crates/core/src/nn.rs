//! Dense multilayer perceptrons with exact reverse-mode gradients.
//!
//! Networks here are tiny (a handful of inputs, two hidden layers), so the
//! implementation favours clarity: one sample at a time, row-major weights,
//! gradients accumulated into a caller-owned [`MlpGrads`] buffer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    /// `1 / (1 + exp(-slope * x))` with `0 < slope < 1`.
    ReducedLogistic { slope: f64 },
}

/// Logistic function with a reduced slope `m` in (0, 1).
pub fn reduced_slope_logistic(x: f64, m: f64) -> Result<f64> {
    check_slope(m)?;
    Ok(logistic(x, m))
}

pub(crate) fn check_slope(m: f64) -> Result<()> {
    if m > 0.0 && m < 1.0 {
        Ok(())
    } else {
        Err(Error::config(
            "logistic_slope",
            format!("logistic slope must lie in (0, 1), got {m}"),
        ))
    }
}

#[inline]
fn logistic(x: f64, m: f64) -> f64 {
    // Split on sign so exp never overflows.
    let z = m * x;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One fully connected layer; `weights` is row-major `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    /// Uniform fan-in initialisation in `[-1/sqrt(n_in), 1/sqrt(n_in)]`.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut layer = Dense::zeros(n_in, n_out);
        for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *w = rng.random_range(-bound..=bound);
        }
        layer
    }

    fn affine(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.n_in).zip(&self.bias))
        {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub head: OutputHead,
}

/// Per-layer activations recorded by [`Mlp::forward`].
///
/// `inputs[k]` is the input fed to layer `k`; `pre[k]` its affine output and
/// `post[k]` the activated output. The last `post` entry is the network output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Gradients shaped like an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| Dense::zeros(l.n_in, l.n_out))
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }
}

impl Mlp {
    /// Builds a network with the given layer widths, e.g. `[3, 64, 64, 6]`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        head: OutputHead,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Mlp::from_layers(layers, hidden, head)
    }

    pub fn from_layers(layers: Vec<Dense>, hidden: Activation, head: OutputHead) -> Result<Self> {
        let mlp = Mlp {
            layers,
            hidden,
            head,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.n_in * l.n_out || l.bias.len() != l.n_out {
                return Err(Error::Shape(format!("layer {k} storage does not match its shape")));
            }
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].n_out != pair[1].n_in {
                return Err(Error::Shape(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].n_out,
                    k + 1,
                    pair[1].n_in
                )));
            }
        }
        if let OutputHead::ReducedLogistic { slope } = self.head {
            check_slope(slope)?;
        }
        if !self.params().all(|p| p.is_finite()) {
            return Err(Error::Shape("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    /// `(n_in, n_out)` for every layer.
    pub fn shape(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.n_in, l.n_out)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters in storage order: per layer, weights then bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.n_in() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.n_in(),
                input.len()
            )));
        }
        if !input.iter().all(|x| x.is_finite()) {
            return Err(Error::Shape("non-finite network input".into()));
        }
        Ok(())
    }

    #[inline]
    fn activate_layer(&self, k: usize, z: f64) -> f64 {
        if k + 1 < self.layers.len() {
            self.hidden.apply(z)
        } else {
            match self.head {
                OutputHead::Linear => z,
                OutputHead::ReducedLogistic { slope } => logistic(z, slope),
            }
        }
    }

    /// Forward pass recording everything the backward pass needs.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(input)?;
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
        };
        let mut x = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.n_out];
            layer.affine(&x, &mut z);
            let y: Vec<f64> = z.iter().map(|&v| self.activate_layer(k, v)).collect();
            cache.inputs.push(std::mem::replace(&mut x, y.clone()));
            cache.pre.push(z);
            cache.post.push(y);
        }
        Ok((x, cache))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.n_out];
            layer.affine(&x, &mut z);
            for v in &mut z {
                *v = self.activate_layer(k, *v);
            }
            x = z;
        }
        Ok(x)
    }

    /// Reverse-mode pass. Parameter gradients are *added* into `grads`;
    /// the gradient with respect to the input is returned.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        let n = self.layers.len();
        if cache.pre.len() != n
            || grads.layers.len() != n
            || self
                .layers
                .iter()
                .zip(&cache.pre)
                .any(|(l, z)| l.n_out != z.len())
        {
            return Err(Error::Shape("forward cache does not match network".into()));
        }
        if output_grad.len() != self.n_out() {
            return Err(Error::Shape(format!(
                "output gradient has {} entries, network emits {}",
                output_grad.len(),
                self.n_out()
            )));
        }

        let mut delta = output_grad.to_vec();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let (z, y) = (&cache.pre[k], &cache.post[k]);
            // delta := dL/dz for this layer
            if k + 1 == n {
                if let OutputHead::ReducedLogistic { slope } = self.head {
                    for (d, &yi) in delta.iter_mut().zip(y) {
                        *d *= slope * yi * (1.0 - yi);
                    }
                }
            } else {
                for ((d, &zi), &yi) in delta.iter_mut().zip(z).zip(y) {
                    *d *= self.hidden.derivative(zi, yi);
                }
            }

            let input = &cache.inputs[k];
            let g = &mut grads.layers[k];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.n_in..(o + 1) * layer.n_in];
                for (gw, &x) in row.iter_mut().zip(input) {
                    *gw += d * x;
                }
            }

            let mut next = vec![0.0; layer.n_in];
            for (row, &d) in layer.weights.chunks_exact(layer.n_in).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                for (nx, &w) in next.iter_mut().zip(row) {
                    *nx += d * w;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Convenience wrapper returning fresh parameter gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
    ) -> Result<(MlpGrads, Vec<f64>)> {
        let mut grads = MlpGrads::zeros_like(self);
        let input_grad = self.backward_into(cache, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Order-sensitive checksum of the raw parameter bits.
    pub fn checksum(&self) -> u64 {
        self.params().fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
            (h ^ p.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// Moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, mlp: &Mlp) -> Self {
        let n = match kind {
            OptimizerKind::Adam { .. } => mlp.param_count(),
            OptimizerKind::Sgd => 0,
        };
        OptimizerState {
            kind,
            learning_rate,
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }

    pub fn adam(learning_rate: f64, mlp: &Mlp) -> Self {
        Self::new(OptimizerKind::ADAM, learning_rate, mlp)
    }

    pub fn sgd(learning_rate: f64, mlp: &Mlp) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate, mlp)
    }

    /// Applies one update. Non-finite gradients abort the step untouched.
    pub fn step(&mut self, params: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        if grads.layers.len() != params.layers.len()
            || grads
                .layers
                .iter()
                .zip(&params.layers)
                .any(|(g, p)| g.weights.len() != p.weights.len() || g.bias.len() != p.bias.len())
        {
            return Err(Error::Shape("gradient shape does not match network".into()));
        }
        if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient {g} at parameter index {i}"
            )));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.params_mut().zip(grads.iter()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first_moment.len() != params.param_count() {
                    return Err(Error::Shape("optimizer state does not match network".into()));
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .params_mut()
                    .zip(grads.iter())
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
