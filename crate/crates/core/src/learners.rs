//! Online linear prediction: TD(0), successor-feature TD, reward
//! regression, the eta-return mixture target that blends them, and the
//! per-step episode loop. Also hosts the offline lambda-return forms used
//! to validate the return algebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::env::{Episode, MrpSpec, Transition};
use crate::error::{Error, Result};
use crate::oracle::FeatureMatrix;

const MAX_EPISODE_STEPS: usize = 1_000_000;

/// Learnable parameters and hyperparameters for prediction.
///
/// `theta` are value weights, `xi` the successor-feature matrix with
/// `psi(s) = xi^T phi(s)`, and `w` reward weights. Initialization is
/// `theta = 0`, `w = 0`, `xi = I`, which makes eta = 0 behave exactly like
/// TD(0) from the first step.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub theta: DVector<f64>,
    pub xi: DMatrix<f64>,
    pub w: DVector<f64>,
    pub eta: f64,
    pub gamma: f64,
    pub alpha_theta: f64,
    pub alpha_xi: f64,
    pub alpha_w: f64,
}

impl LearnerState {
    pub fn new(
        d: usize,
        eta: f64,
        gamma: f64,
        alpha_theta: f64,
        alpha_xi: f64,
        alpha_w: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidSpec(format!("eta must lie in [0,1], got {eta}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidSpec(format!("gamma must lie in [0,1], got {gamma}")));
        }
        for (name, a) in [("alpha_theta", alpha_theta), ("alpha_xi", alpha_xi), ("alpha_w", alpha_w)] {
            if a <= 0.0 || !a.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be positive, got {a}")));
            }
        }
        Ok(LearnerState {
            theta: DVector::zeros(d),
            xi: DMatrix::identity(d, d),
            w: DVector::zeros(d),
            eta,
            gamma,
            alpha_theta,
            alpha_xi,
            alpha_w,
        })
    }

    pub fn d(&self) -> usize {
        self.theta.len()
    }

    /// Linear value estimate `phi^T theta`.
    pub fn value(&self, phi_s: &DVector<f64>) -> f64 {
        phi_s.dot(&self.theta)
    }

    pub fn check_finite(&self) -> Result<()> {
        let finite = self.theta.iter().all(|x| x.is_finite())
            && self.w.iter().all(|x| x.is_finite())
            && self.xi.iter().all(|x| x.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::Overflow("learner parameters left the finite range".into()))
        }
    }
}

/// The assembled mixture target with its parts exposed: the reward, the
/// successor-feature vector at the next state, and the blended weight
/// vector it is dotted with.
#[derive(Debug, Clone)]
pub struct EtaTarget {
    pub value: f64,
    pub r: f64,
    pub sf_vector: DVector<f64>,
    pub mixture_weights: DVector<f64>,
}

/// One-step TD target `r + gamma phi_next^T theta`. Terminal states have a
/// zero feature row, so the target degenerates to `r` there.
pub fn td0_target(r: f64, phi_next: &DVector<f64>, theta: &DVector<f64>, gamma: f64) -> f64 {
    r + gamma * phi_next.dot(theta)
}

/// Mixture target `r + gamma psi^T ((1-eta) theta + eta w)` with
/// `psi = xi^T phi_next`.
pub fn eta_return_target(state: &LearnerState, r: f64, phi_next: &DVector<f64>) -> EtaTarget {
    let sf_vector = state.xi.tr_mul(phi_next);
    let mixture_weights = (1.0 - state.eta) * &state.theta + state.eta * &state.w;
    let value = r + state.gamma * sf_vector.dot(&mixture_weights);
    EtaTarget { value, r, sf_vector, mixture_weights }
}

/// Semi-gradient value update `theta += alpha (target - phi^T theta) phi`.
pub fn td0_value_update(state: &mut LearnerState, phi_t: &DVector<f64>, target: f64) {
    let err = target - phi_t.dot(&state.theta);
    state.theta.axpy(state.alpha_theta * err, phi_t, 1.0);
}

/// Successor-feature TD update at discount `eta * gamma`:
/// `xi += alpha phi_t (phi_t + eta gamma xi^T phi_next - xi^T phi_t)^T`.
pub fn sf_td_update(state: &mut LearnerState, phi_t: &DVector<f64>, phi_next: &DVector<f64>) {
    sf_td_update_raw(&mut state.xi, phi_t, phi_next, state.eta * state.gamma, state.alpha_xi);
}

/// Reward regression update `w += alpha (r - phi^T w) phi`.
pub fn reward_update(state: &mut LearnerState, phi_t: &DVector<f64>, r: f64) {
    reward_update_raw(&mut state.w, phi_t, r, state.alpha_w);
}

pub(crate) fn sf_td_update_raw(
    xi: &mut DMatrix<f64>,
    phi_t: &DVector<f64>,
    phi_next: &DVector<f64>,
    discount: f64,
    alpha: f64,
) {
    let mut delta = phi_t.clone();
    delta.axpy(discount, &xi.tr_mul(phi_next), 1.0);
    delta.axpy(-1.0, &xi.tr_mul(phi_t), 1.0);
    xi.ger(alpha, phi_t, &delta, 1.0);
}

pub(crate) fn reward_update_raw(w: &mut DVector<f64>, phi_t: &DVector<f64>, r: f64, alpha: f64) {
    let err = r - phi_t.dot(w);
    w.axpy(alpha * err, phi_t, 1.0);
}

/// Runs one episode of the mixture learner. Per step, in order: the SF
/// update, the reward update, the mixture target built from the freshly
/// updated `xi` and `w`, then the value update. Parameters are checked for
/// finiteness once per episode.
pub fn algorithm1_episode<R: Rng + ?Sized>(
    state: &mut LearnerState,
    spec: &MrpSpec,
    phi: &FeatureMatrix,
    rng: &mut R,
) -> Result<Episode> {
    let mut transitions = Vec::new();
    let mut s = spec.sample_start(rng);
    let mut phi_t = phi.phi(s);
    for _ in 0..MAX_EPISODE_STEPS {
        let t = spec.step(s, rng)?;
        let phi_next = phi.phi(t.s_next);
        sf_td_update(state, &phi_t, &phi_next);
        reward_update(state, &phi_t, t.r);
        let target = eta_return_target(state, t.r, &phi_next);
        td0_value_update(state, &phi_t, target.value);
        let done = t.done;
        s = t.s_next;
        transitions.push(t);
        if done {
            state.check_finite()?;
            return Ok(Episode { transitions });
        }
        phi_t = phi_next;
    }
    Err(Error::Contract(format!("episode did not terminate within {MAX_EPISODE_STEPS} steps")))
}

/// Both algebraic forms of the lambda-return, one value per step of the
/// episode.
///
/// Form A is the weighted n-step average with the episodic convention that
/// the weight mass beyond termination collapses onto the full return. Form
/// B folds the same sum into rewards plus value corrections:
/// `r_{t+1} + gamma sum_n (lambda gamma)^{n-1} ((1-lambda) V(s_{t+n}) + lambda r_{t+n+1})`.
/// They agree identically; the pair exists so tests can assert it.
pub fn lambda_return_two_forms(
    episode: &Episode,
    values: &DVector<f64>,
    lam: f64,
    gamma: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    episode.validate()?;
    let steps = &episode.transitions;
    let t_len = steps.len();
    let reward = |k: usize| steps[k].r;
    let value_at = |k: usize| {
        let s = if k < t_len { steps[k].s } else { steps[t_len - 1].s_next };
        values[s]
    };
    let mut form_a = Vec::with_capacity(t_len);
    let mut form_b = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let horizon = t_len - t;
        // Form A: (1-lam) sum_{n<horizon} lam^{n-1} G^(n) + lam^{horizon-1} G.
        let mut reward_sum = 0.0;
        let mut discount = 1.0;
        let mut acc = 0.0;
        let mut lam_pow = 1.0;
        for n in 1..horizon {
            reward_sum += discount * reward(t + n - 1);
            discount *= gamma;
            let g_n = reward_sum + discount * value_at(t + n);
            acc += lam_pow * g_n;
            lam_pow *= lam;
        }
        reward_sum += discount * reward(t_len - 1);
        form_a.push((1.0 - lam) * acc + lam_pow * reward_sum);

        // Form B: r + gamma sum_n (lam gamma)^{n-1} ((1-lam) V + lam r).
        let mut tail = 0.0;
        let mut lg_pow = 1.0;
        for n in 1..horizon {
            tail += lg_pow * ((1.0 - lam) * value_at(t + n) + lam * reward(t + n));
            lg_pow *= lam * gamma;
        }
        form_b.push(reward(t) + gamma * tail);
    }
    Ok((form_a, form_b))
}

/// Convenience for tests: the Monte Carlo return from each step.
pub fn monte_carlo_returns(episode: &Episode, gamma: f64) -> Vec<f64> {
    let mut returns = vec![0.0; episode.len()];
    let mut acc = 0.0;
    for (k, t) in episode.transitions.iter().enumerate().rev() {
        acc = t.r + gamma * acc;
        returns[k] = acc;
    }
    returns
}

/// Plain TD(0) over one episode, for trajectory-equivalence tests.
pub fn td0_episode<R: Rng + ?Sized>(
    state: &mut LearnerState,
    spec: &MrpSpec,
    phi: &FeatureMatrix,
    rng: &mut R,
) -> Result<Episode> {
    let mut transitions: Vec<Transition> = Vec::new();
    let mut s = spec.sample_start(rng);
    for _ in 0..MAX_EPISODE_STEPS {
        let t = spec.step(s, rng)?;
        let phi_t = phi.phi(t.s);
        let phi_next = phi.phi(t.s_next);
        let target = td0_target(t.r, &phi_next, &state.theta, state.gamma);
        td0_value_update(state, &phi_t, target);
        let done = t.done;
        s = t.s_next;
        transitions.push(t);
        if done {
            state.check_finite()?;
            return Ok(Episode { transitions });
        }
    }
    Err(Error::Contract(format!("episode did not terminate within {MAX_EPISODE_STEPS} steps")))
}
