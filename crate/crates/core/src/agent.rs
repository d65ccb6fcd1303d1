//! Normalized advantage function agent.
//!
//! `Q(s, a) = V(s) + A(s, a)` with `A = -1/2 (a - mu)^T L L^T (a - mu)`.
//! Three independent networks produce `mu(s)`, `V(s)` and the entries of the
//! lower-triangular `L(s)`; a fourth, `V'`, is a frozen copy of `V` refreshed
//! only by [`AgentParams::hard_update_target`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{check_slope, Activation, Mlp, MlpGrads, OptimizerKind, OptimizerState, OutputHead};
use crate::replay::Transition;

/// Number of raw entries that fill a `dim x dim` lower triangle.
pub fn tri_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Square `dim x dim` matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(dim: usize) -> Self {
        SquareMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.dim + col] = v;
    }

    /// `self * self^T`.
    pub fn gram(&self) -> SquareMatrix {
        let n = self.dim;
        let mut p = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..n).map(|k| self.get(i, k) * self.get(j, k)).sum();
                p.set(i, j, s);
            }
        }
        p
    }
}

/// Fills a lower-triangular matrix row by row from `entries`.
///
/// Diagonal entries are squared (plus `diag_eps`); strictly-lower entries are
/// copied as is.
pub fn build_l(entries: &[f64], dim: usize, diag_eps: f64) -> Result<SquareMatrix> {
    if entries.len() != tri_len(dim) {
        return Err(Error::Shape(format!(
            "L needs {} entries for dimension {dim}, got {}",
            tri_len(dim),
            entries.len()
        )));
    }
    let mut l = SquareMatrix::zeros(dim);
    let mut it = entries.iter();
    for row in 0..dim {
        for col in 0..=row {
            let raw = *it.next().expect("length checked");
            let v = if row == col { raw * raw + diag_eps } else { raw };
            l.set(row, col, v);
        }
    }
    Ok(l)
}

/// Network and learning hyper-parameters for [`AgentParams::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub logistic_slope: f64,
    pub gamma: f64,
    pub diag_eps: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            state_dim: 3,
            action_dim: 6,
            hidden_layers: vec![64, 64],
            activation: Activation::Relu,
            logistic_slope: 0.02,
            gamma: 0.99,
            diag_eps: 1e-6,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::config("state_dim", "state_dim must be positive"));
        }
        if self.action_dim == 0 {
            return Err(Error::config("action_dim", "action_dim must be positive"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::config("hidden_layers", "hidden layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", "gamma must be < 1 and >= 0"));
        }
        if !(self.diag_eps >= 0.0 && self.diag_eps.is_finite()) {
            return Err(Error::config("diag_eps", "diag_eps must be finite and >= 0"));
        }
        check_slope(self.logistic_slope)
    }

    fn sizes(&self, out: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden_layers.len() + 2);
        s.push(self.state_dim);
        s.extend_from_slice(&self.hidden_layers);
        s.push(out);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    /// state -> excitations in (0, 1).
    pub mu: Mlp,
    /// state -> V(s).
    pub value: Mlp,
    /// Target copy of `value`, used only for bootstrapping.
    pub value_target: Mlp,
    /// state -> raw lower-triangle entries of L(s).
    pub l_net: Mlp,
    pub action_dim: usize,
    pub gamma: f64,
    pub diag_eps: f64,
}

/// Decomposed Q evaluation at one (state, action) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParts {
    pub value: f64,
    pub advantage: f64,
}

impl QParts {
    pub fn q(&self) -> f64 {
        self.value + self.advantage
    }
}

impl AgentParams {
    pub fn new<R: Rng + ?Sized>(cfg: &AgentConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let head = OutputHead::ReducedLogistic {
            slope: cfg.logistic_slope,
        };
        let mu = Mlp::new(&cfg.sizes(cfg.action_dim), cfg.activation, head, rng)?;
        let value = Mlp::new(&cfg.sizes(1), cfg.activation, OutputHead::Linear, rng)?;
        let l_net = Mlp::new(
            &cfg.sizes(tri_len(cfg.action_dim)),
            cfg.activation,
            OutputHead::Linear,
            rng,
        )?;
        let params = AgentParams {
            value_target: value.clone(),
            mu,
            value,
            l_net,
            action_dim: cfg.action_dim,
            gamma: cfg.gamma,
            diag_eps: cfg.diag_eps,
        };
        params.validate()?;
        Ok(params)
    }

    /// Structural invariants tying the four networks together.
    pub fn validate(&self) -> Result<()> {
        for net in [&self.mu, &self.value, &self.value_target, &self.l_net] {
            net.validate()?;
        }
        let n_in = self.mu.n_in();
        if self.value.n_in() != n_in || self.l_net.n_in() != n_in {
            return Err(Error::Shape("networks disagree on state dimension".into()));
        }
        if self.mu.n_out() != self.action_dim {
            return Err(Error::Shape("mu output width must equal action_dim".into()));
        }
        if !matches!(self.mu.head, OutputHead::ReducedLogistic { .. }) {
            return Err(Error::Shape("mu must end in a reduced-slope logistic".into()));
        }
        if self.value.n_out() != 1 {
            return Err(Error::Shape("V must emit a scalar".into()));
        }
        if self.value.shape() != self.value_target.shape() {
            return Err(Error::Shape("V' shape differs from V".into()));
        }
        if self.l_net.n_out() != tri_len(self.action_dim) {
            return Err(Error::Shape(format!(
                "L network must emit {} entries",
                tri_len(self.action_dim)
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", "gamma must be < 1 and >= 0"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.mu.n_in()
    }

    fn check_action(&self, action: &[f64]) -> Result<()> {
        if action.len() != self.action_dim {
            return Err(Error::Dimension {
                expected: self.action_dim,
                actual: action.len(),
            });
        }
        Ok(())
    }

    /// Greedy action `mu(s)`; each component lies in (0, 1).
    pub fn select_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.mu.predict(state)
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.value.predict(state)?[0])
    }

    pub fn target_value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.value_target.predict(state)?[0])
    }

    pub fn l_matrix(&self, state: &[f64]) -> Result<SquareMatrix> {
        build_l(&self.l_net.predict(state)?, self.action_dim, self.diag_eps)
    }

    pub fn advantage(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        self.check_action(action)?;
        let mu = self.select_action(state)?;
        let l = self.l_matrix(state)?;
        let d: Vec<f64> = action.iter().zip(&mu).map(|(a, m)| a - m).collect();
        Ok(advantage_from(&l, &d))
    }

    pub fn q_parts(&self, state: &[f64], action: &[f64]) -> Result<QParts> {
        Ok(QParts {
            value: self.value(state)?,
            advantage: self.advantage(state, action)?,
        })
    }

    pub fn q_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.q_parts(state, action)?.q())
    }

    /// Bellman target `r + gamma * V'(s')`, or `r` at a terminal transition.
    pub fn compute_target(&self, reward: f64, next_state: &[f64], terminal: bool) -> Result<f64> {
        if terminal {
            Ok(reward)
        } else {
            Ok(reward + self.gamma * self.target_value(next_state)?)
        }
    }

    pub fn hard_update_target(&mut self) {
        self.value_target = self.value.clone();
    }
}

/// `-1/2 |L^T d|^2`, i.e. `-1/2 d^T L L^T d`.
fn advantage_from(l: &SquareMatrix, d: &[f64]) -> f64 {
    let z = lt_times(l, d);
    -0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

fn lt_times(l: &SquareMatrix, d: &[f64]) -> Vec<f64> {
    let n = l.dim;
    (0..n)
        .map(|j| (j..n).map(|i| l.get(i, j) * d[i]).sum())
        .collect()
}

/// Optimizer states for the three trained networks.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentOptimizers {
    pub mu: OptimizerState,
    pub value: OptimizerState,
    pub l_net: OptimizerState,
}

impl AgentOptimizers {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &AgentParams) -> Self {
        AgentOptimizers {
            mu: OptimizerState::new(kind, learning_rate, &params.mu),
            value: OptimizerState::new(kind, learning_rate, &params.value),
            l_net: OptimizerState::new(kind, learning_rate, &params.l_net),
        }
    }
}

/// Gradients of the mean squared Bellman error for the three trained networks.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGrads {
    pub mu: MlpGrads,
    pub value: MlpGrads,
    pub l_net: MlpGrads,
}

impl AgentGrads {
    pub fn zeros_like(params: &AgentParams) -> Self {
        AgentGrads {
            mu: MlpGrads::zeros_like(&params.mu),
            value: MlpGrads::zeros_like(&params.value),
            l_net: MlpGrads::zeros_like(&params.l_net),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.mu.all_finite() && self.value.all_finite() && self.l_net.all_finite()
    }
}

/// Bellman loss and its gradients, with the targets `ys` held constant.
pub fn loss_and_grads(
    params: &AgentParams,
    batch: &[&Transition],
    ys: &[f64],
) -> Result<(f64, AgentGrads)> {
    if batch.is_empty() || batch.len() != ys.len() {
        return Err(Error::Training("empty or misaligned batch".into()));
    }
    let n = params.action_dim;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = AgentGrads::zeros_like(params);
    let mut loss = 0.0;

    for (tr, &y) in batch.iter().zip(ys) {
        params.check_action(&tr.action)?;
        let (v, v_cache) = params.value.forward(&tr.state)?;
        let (mu, mu_cache) = params.mu.forward(&tr.state)?;
        let (raw, l_cache) = params.l_net.forward(&tr.state)?;
        let l = build_l(&raw, n, params.diag_eps)?;

        let d: Vec<f64> = tr.action.iter().zip(&mu).map(|(a, m)| a - m).collect();
        let z = lt_times(&l, &d);
        let adv = -0.5 * z.iter().map(|v| v * v).sum::<f64>();
        let residual = v[0] + adv - y;
        loss += residual * residual * scale;

        // dLoss/dQ; Q = V + A so this is also dLoss/dV and dLoss/dA.
        let g = 2.0 * residual * scale;
        if g == 0.0 {
            continue;
        }

        params.value.backward_into(&v_cache, &[g], &mut grads.value)?;

        // dA/dmu = L z (since dA/dd = -L z and d = a - mu).
        let mu_grad: Vec<f64> = (0..n)
            .map(|i| g * (0..=i).map(|j| l.get(i, j) * z[j]).sum::<f64>())
            .collect();
        params.mu.backward_into(&mu_cache, &mu_grad, &mut grads.mu)?;

        // dA/dL_ij = -d_i z_j for i >= j; diagonal entries are raw^2 + eps.
        let mut l_grad = Vec::with_capacity(raw.len());
        let mut k = 0;
        for i in 0..n {
            for j in 0..=i {
                let dl = -d[i] * z[j];
                let chain = if i == j { 2.0 * raw[k] } else { 1.0 };
                l_grad.push(g * dl * chain);
                k += 1;
            }
        }
        params.l_net.backward_into(&l_cache, &l_grad, &mut grads.l_net)?;
    }
    Ok((loss, grads))
}

/// One gradient step on the mean squared Bellman error of `batch`.
///
/// Targets use `V'` and are computed before any parameter moves. `V'` itself
/// is never modified here.
pub fn train_step(
    params: &mut AgentParams,
    opt: &mut AgentOptimizers,
    batch: &[&Transition],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let ys = batch
        .iter()
        .map(|t| params.compute_target(t.reward, &t.next_state, t.terminal))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = loss_and_grads(params, batch, &ys)?;
    if !loss.is_finite() || !grads.all_finite() {
        let culprit = batch
            .iter()
            .zip(&ys)
            .find(|(t, y)| {
                !y.is_finite()
                    || params
                        .q_value(&t.state, &t.action)
                        .map_or(true, |q| !q.is_finite())
            })
            .map(|(t, y)| format!("{t:?} (target {y})"))
            .unwrap_or_else(|| "no single offending transition".into());
        return Err(Error::Training(format!(
            "non-finite Bellman loss {loss}; {culprit}"
        )));
    }
    opt.value.step(&mut params.value, &grads.value)?;
    opt.mu.step(&mut params.mu, &grads.mu)?;
    opt.l_net.step(&mut params.l_net, &grads.l_net)?;
    Ok(loss)
}
