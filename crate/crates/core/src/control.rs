//! Mixture-target Q-learning: online control updates, a replay buffer, and
//! the fitted-Q loss structure with stop-gradient targets over a fixed
//! linear encoder.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::env::{MdpSpec, Transition};
use crate::error::{Error, Result};
use crate::learners::{reward_update_raw, sf_td_update_raw};
use crate::oracle::FeatureMatrix;

/// Linear anneal from `initial` at step 0 to `final_value` at `anneal_steps`,
/// constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub initial: f64,
    pub final_value: f64,
    pub anneal_steps: usize,
}

impl EpsilonSchedule {
    pub fn new(initial: f64, final_value: f64, anneal_steps: usize) -> Result<Self> {
        for (name, e) in [("initial", initial), ("final", final_value)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::InvalidSpec(format!(
                    "{name} epsilon must lie in [0,1], got {e}"
                )));
            }
        }
        Ok(Self { initial, final_value, anneal_steps })
    }

    pub fn constant(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, epsilon, 0)
    }

    /// Exploration rate after `step` environment steps. Linear interpolation
    /// keeps the value between the two endpoints, so it stays in [0,1].
    pub fn value(&self, step: usize) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.final_value;
        }
        let frac = step as f64 / self.anneal_steps as f64;
        self.initial + (self.final_value - self.initial) * frac
    }
}

/// Q-learning parameters: per-action value weights plus the shared
/// successor-feature and reward heads the mixture target reads.
#[derive(Debug, Clone, PartialEq)]
pub struct QLearnerState {
    /// Column `a` holds `theta_a`; `q(s, a) = phi(s)^T theta_a`.
    pub theta: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub w: DVector<f64>,
    pub eta: f64,
    pub gamma: f64,
    pub alpha_q: f64,
    pub alpha_xi: f64,
    pub alpha_w: f64,
    pub epsilon: EpsilonSchedule,
    /// Environment steps taken so far; drives the epsilon anneal.
    pub steps: usize,
}

impl QLearnerState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        n_actions: usize,
        eta: f64,
        gamma: f64,
        alpha_q: f64,
        alpha_xi: f64,
        alpha_w: f64,
        epsilon: EpsilonSchedule,
    ) -> Result<Self> {
        if dim == 0 || n_actions == 0 {
            return Err(Error::InvalidSpec(
                "control learner needs at least one feature and one action".into(),
            ));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidSpec(format!("eta must lie in [0,1], got {eta}")));
        }
        // Strict at 1: undiscounted control has no contraction to lean on.
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidSpec(format!("gamma must lie in [0,1), got {gamma}")));
        }
        for (name, a) in [("alpha_q", alpha_q), ("alpha_xi", alpha_xi), ("alpha_w", alpha_w)] {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "{name} must be finite and non-negative, got {a}"
                )));
            }
        }
        Ok(Self {
            theta: DMatrix::zeros(dim, n_actions),
            xi: DMatrix::identity(dim, dim),
            w: DVector::zeros(dim),
            eta,
            gamma,
            alpha_q,
            alpha_xi,
            alpha_w,
            epsilon,
            steps: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.theta.ncols()
    }

    /// Action values `theta^T phi(s)` for one state.
    pub fn q_values(&self, phi_s: &DVector<f64>) -> DVector<f64> {
        self.theta.tr_mul(phi_s)
    }

    pub fn current_epsilon(&self) -> f64 {
        self.epsilon.value(self.steps)
    }

    pub fn check_finite(&self) -> Result<()> {
        let ok = self.theta.iter().all(|v| v.is_finite())
            && self.xi.iter().all(|v| v.is_finite())
            && self.w.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Overflow(
                "control parameters left the finite range; reduce the learning rates".into(),
            ))
        }
    }
}

/// Greedy mixture bootstrap `(1-eta) max_a psi^T theta_a + eta psi^T w` with
/// `psi = xi^T phi_next`. Zero features (terminal successor) give zero.
pub fn eta_q_target(state: &QLearnerState, phi_next: &DVector<f64>) -> f64 {
    eta_q_target_forms(state, phi_next).0
}

/// Both algebraic readings of the greedy mixture target. The reward term is
/// action-independent, so maxing the full mixture per action and mixing in
/// the per-action max afterwards coincide; returned as
/// `(factored, max_of_mixture)` so tests can assert the equality.
pub fn eta_q_target_forms(state: &QLearnerState, phi_next: &DVector<f64>) -> (f64, f64) {
    let psi = state.xi.tr_mul(phi_next);
    let q_next = state.theta.tr_mul(&psi);
    let reward_term = psi.dot(&state.w);
    let factored = (1.0 - state.eta) * q_next.max() + state.eta * reward_term;
    let max_of_mixture = q_next
        .iter()
        .map(|&q| (1.0 - state.eta) * q + state.eta * reward_term)
        .fold(f64::NEG_INFINITY, f64::max);
    (factored, max_of_mixture)
}

/// Uniform random action with probability `epsilon`, otherwise the
/// lowest-index argmax of `q_row`.
pub fn epsilon_greedy<R: Rng + ?Sized>(
    q_row: &DVector<f64>,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if q_row.is_empty() {
        return Err(Error::Contract("epsilon_greedy needs a non-empty action set".into()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Contract(format!("epsilon must lie in [0,1], got {epsilon}")));
    }
    if rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..q_row.len()));
    }
    Ok(argmax(q_row))
}

fn argmax(q_row: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, &q) in q_row.iter().enumerate().skip(1) {
        if q > q_row[best] {
            best = i;
        }
    }
    best
}

/// One online control update. Refreshes the successor-feature and reward
/// heads with the same updates the prediction learner uses, then regresses
/// the taken action's column toward `r + gamma * eta_q_target` computed from
/// the refreshed heads. Other columns do not move.
pub fn q_learning_step(
    state: &mut QLearnerState,
    phi: &FeatureMatrix,
    transition: &Transition,
) -> Result<()> {
    let action = transition.a.ok_or_else(|| {
        Error::Contract("control update needs the taken action on the transition".into())
    })?;
    if action >= state.n_actions() {
        return Err(Error::Contract(format!(
            "action {action} out of range for {} actions",
            state.n_actions()
        )));
    }
    let phi_t = phi.phi(transition.s);
    let phi_next = phi.phi(transition.s_next);
    sf_td_update_raw(&mut state.xi, &phi_t, &phi_next, state.eta * state.gamma, state.alpha_xi);
    reward_update_raw(&mut state.w, &phi_t, transition.r, state.alpha_w);
    let target = transition.r + state.gamma * eta_q_target(state, &phi_next);
    let err = target - state.theta.column(action).dot(&phi_t);
    state.theta.column_mut(action).axpy(state.alpha_q * err, &phi_t, 1.0);
    state.steps += 1;
    Ok(())
}

/// Fixed-capacity FIFO transition store with uniform with-replacement
/// sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    buf: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidSpec("replay capacity must be at least 1".into()));
        }
        Ok(Self { buf: VecDeque::with_capacity(capacity), capacity })
    }

    /// Appends, evicting the oldest entry once at capacity.
    pub fn push(&mut self, transition: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(transition);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.buf.iter()
    }

    /// Uniform i.i.d. minibatch of size `n`, drawn with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.buf.is_empty() {
            return Err(Error::Contract("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| self.buf[rng.random_range(0..self.buf.len())].clone()).collect())
    }
}

/// Minibatch-averaged fitted-Q losses. `total` is kept equal to the sum of
/// the three parts by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_sf: f64,
    pub l_r: f64,
    pub l_q: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(l_sf: f64, l_r: f64, l_q: f64) -> Self {
        Self { l_sf, l_r, l_q, total: l_sf + l_r + l_q }
    }
}

/// Gradients of the total minibatch loss with respect to each parameter
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct QGradients {
    pub d_theta: DMatrix<f64>,
    pub d_xi: DMatrix<f64>,
    pub d_w: DVector<f64>,
}

/// Regression targets for one minibatch, frozen at the parameters they were
/// computed from. Holding them fixed while parameters move is what the
/// stop-gradient in the loss definitions means.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedQTargets {
    /// Per-tuple successor-feature targets `phi_t + eta gamma xi^T phi_next`.
    pub sf: Vec<DVector<f64>>,
    /// Per-tuple value targets `r + gamma * eta_q_target(phi_next)`.
    pub q: Vec<f64>,
}

/// Computes the stop-gradient targets for `batch` at the current parameters.
pub fn fitted_q_targets(
    state: &QLearnerState,
    phi: &FeatureMatrix,
    batch: &[Transition],
) -> Result<FittedQTargets> {
    check_batch(state, batch)?;
    let mut sf = Vec::with_capacity(batch.len());
    let mut q = Vec::with_capacity(batch.len());
    for t in batch {
        let phi_t = phi.phi(t.s);
        let phi_next = phi.phi(t.s_next);
        let mut y_sf = phi_t;
        y_sf.axpy(state.eta * state.gamma, &state.xi.tr_mul(&phi_next), 1.0);
        sf.push(y_sf);
        q.push(t.r + state.gamma * eta_q_target(state, &phi_next));
    }
    Ok(FittedQTargets { sf, q })
}

/// Minibatch losses against pre-computed (frozen) targets:
/// `L_S = 1/2 ||y_sf - xi^T phi||^2`, `L_R = 1/2 (r - phi^T w)^2`,
/// `L_Q = 1/2 (y_q - phi^T theta_a)^2`, each averaged over the batch.
pub fn fitted_q_losses_with(
    state: &QLearnerState,
    phi: &FeatureMatrix,
    batch: &[Transition],
    targets: &FittedQTargets,
) -> Result<LossBreakdown> {
    check_targets(batch, targets)?;
    let n = batch.len() as f64;
    let (mut l_sf, mut l_r, mut l_q) = (0.0, 0.0, 0.0);
    for (i, t) in batch.iter().enumerate() {
        let phi_t = phi.phi(t.s);
        let sf_residual = &targets.sf[i] - state.xi.tr_mul(&phi_t);
        l_sf += 0.5 * sf_residual.norm_squared();
        let r_err = t.r - phi_t.dot(&state.w);
        l_r += 0.5 * r_err * r_err;
        let a = taken_action(state, t)?;
        let q_err = targets.q[i] - state.theta.column(a).dot(&phi_t);
        l_q += 0.5 * q_err * q_err;
    }
    Ok(LossBreakdown::new(l_sf / n, l_r / n, l_q / n))
}

/// Gradients of the batch-averaged total loss against frozen targets. Only
/// the taken action's column of `theta` receives gradient from each tuple.
pub fn fitted_q_gradients(
    state: &QLearnerState,
    phi: &FeatureMatrix,
    batch: &[Transition],
    targets: &FittedQTargets,
) -> Result<QGradients> {
    check_targets(batch, targets)?;
    let n = batch.len() as f64;
    let mut d_theta = DMatrix::zeros(state.dim(), state.n_actions());
    let mut d_xi = DMatrix::zeros(state.dim(), state.dim());
    let mut d_w = DVector::zeros(state.dim());
    for (i, t) in batch.iter().enumerate() {
        let phi_t = phi.phi(t.s);
        let sf_residual = &targets.sf[i] - state.xi.tr_mul(&phi_t);
        d_xi.ger(-1.0 / n, &phi_t, &sf_residual, 1.0);
        let r_err = t.r - phi_t.dot(&state.w);
        d_w.axpy(-r_err / n, &phi_t, 1.0);
        let a = taken_action(state, t)?;
        let q_err = targets.q[i] - state.theta.column(a).dot(&phi_t);
        d_theta.column_mut(a).axpy(-q_err / n, &phi_t, 1.0);
    }
    Ok(QGradients { d_theta, d_xi, d_w })
}

/// Losses and gradients for one minibatch at the current parameters, with
/// targets computed and frozen first.
pub fn fitted_q_losses(
    state: &QLearnerState,
    phi: &FeatureMatrix,
    batch: &[Transition],
) -> Result<(LossBreakdown, QGradients)> {
    let targets = fitted_q_targets(state, phi, batch)?;
    let losses = fitted_q_losses_with(state, phi, batch, &targets)?;
    let grads = fitted_q_gradients(state, phi, batch, &targets)?;
    Ok((losses, grads))
}

/// One fitted-Q descent step on `batch`: each head moves against its
/// gradient at its own learning rate. Returns the pre-step losses.
pub fn fitted_q_apply(
    state: &mut QLearnerState,
    phi: &FeatureMatrix,
    batch: &[Transition],
) -> Result<LossBreakdown> {
    let (losses, grads) = fitted_q_losses(state, phi, batch)?;
    state.xi -= state.alpha_xi * &grads.d_xi;
    state.w.axpy(-state.alpha_w, &grads.d_w, 1.0);
    state.theta -= state.alpha_q * &grads.d_theta;
    Ok(losses)
}

fn check_batch(state: &QLearnerState, batch: &[Transition]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("fitted-q minibatch is empty".into()));
    }
    for t in batch {
        taken_action(state, t)?;
    }
    Ok(())
}

fn check_targets(batch: &[Transition], targets: &FittedQTargets) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("fitted-q minibatch is empty".into()));
    }
    if targets.sf.len() != batch.len() || targets.q.len() != batch.len() {
        return Err(Error::Contract(format!(
            "targets were built for a batch of {}, got {}",
            targets.sf.len(),
            batch.len()
        )));
    }
    Ok(())
}

fn taken_action(state: &QLearnerState, t: &Transition) -> Result<usize> {
    let a = t
        .a
        .ok_or_else(|| Error::Contract("control update needs the taken action".into()))?;
    if a >= state.n_actions() {
        return Err(Error::Contract(format!(
            "action {a} out of range for {} actions",
            state.n_actions()
        )));
    }
    Ok(a)
}

/// How `run_control` turns transitions into updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlMode {
    /// One `q_learning_step` per environment step.
    Online,
    /// Replay-buffer minibatch descent, one step per environment step once
    /// the buffer holds at least `batch` transitions.
    FittedQ { capacity: usize, batch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    pub eta: f64,
    pub gamma: f64,
    pub alpha_q: f64,
    pub alpha_xi: f64,
    pub alpha_w: f64,
    pub epsilon: EpsilonSchedule,
    /// Total environment steps across all episodes.
    pub total_steps: usize,
    /// Hard per-episode cutoff; the episode return is recorded as-is.
    pub max_episode_steps: usize,
    pub mode: ControlMode,
}

/// A finished control run: the learner and the undiscounted return of every
/// episode, the last possibly truncated by the step budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRun {
    pub state: QLearnerState,
    pub episode_returns: Vec<f64>,
}

/// Trains on `spec` with tabular features until the step budget is spent.
/// Behavior is epsilon-greedy under the annealing schedule; episodes start
/// from the spec's start distribution and end at a terminal state or the
/// episode cap.
pub fn run_control<R: Rng + ?Sized>(
    spec: &MdpSpec,
    config: &ControlConfig,
    rng: &mut R,
) -> Result<ControlRun> {
    if config.total_steps == 0 || config.max_episode_steps == 0 {
        return Err(Error::InvalidSpec(
            "control run needs positive step budget and episode cap".into(),
        ));
    }
    let nonterminal: Vec<bool> =
        (0..spec.n_states).map(|s| !spec.terminal.contains(&s)).collect();
    let phi = FeatureMatrix::tabular(&nonterminal);
    let mut state = QLearnerState::new(
        phi.d(),
        spec.n_actions,
        config.eta,
        config.gamma,
        config.alpha_q,
        config.alpha_xi,
        config.alpha_w,
        config.epsilon,
    )?;
    let mut buffer = match config.mode {
        ControlMode::Online => None,
        ControlMode::FittedQ { capacity, batch } => {
            if batch == 0 {
                return Err(Error::InvalidSpec("fitted-q batch size must be positive".into()));
            }
            Some((ReplayBuffer::new(capacity)?, batch))
        }
    };
    let mut episode_returns = Vec::new();
    let mut steps_left = config.total_steps;
    while steps_left > 0 {
        let mut s = spec.sample_start(rng);
        let mut ep_return = 0.0;
        for _ in 0..config.max_episode_steps {
            let eps = state.current_epsilon();
            let q_row = state.q_values(&phi.phi(s));
            let a = epsilon_greedy(&q_row, eps, rng)?;
            let t = spec.step(s, a, rng)?;
            ep_return += t.r;
            match &mut buffer {
                None => q_learning_step(&mut state, &phi, &t)?,
                Some((buf, batch)) => {
                    buf.push(t.clone());
                    // The schedule counts environment steps in both modes.
                    state.steps += 1;
                    if buf.len() >= *batch {
                        let minibatch = buf.sample(*batch, rng)?;
                        fitted_q_apply(&mut state, &phi, &minibatch)?;
                    }
                }
            }
            steps_left -= 1;
            let done = t.done;
            s = t.s_next;
            if done || steps_left == 0 {
                break;
            }
        }
        state.check_finite()?;
        episode_returns.push(ep_return);
    }
    Ok(ControlRun { state, episode_returns })
}

/// Lowest-index greedy action per state under the current `theta`; terminal
/// states (zero features) fall back to action 0.
pub fn greedy_policy(state: &QLearnerState, phi: &FeatureMatrix) -> Vec<usize> {
    (0..phi.n_states()).map(|s| argmax(&state.q_values(&phi.phi(s)))).collect()
}
