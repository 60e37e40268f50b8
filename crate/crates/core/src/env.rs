//! Chain and gridworld environments: construction, sampling, and exact
//! matrix forms for the fixed-point solvers.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// One sampled step. `a` is `None` for Markov reward processes.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: Option<usize>,
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
}

/// A finite episode: consecutive transitions chain and the last one
/// terminates.
#[derive(Debug, Clone, Default)]
pub struct Episode {
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Undiscounted sum of rewards.
    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum()
    }

    /// Checks the chaining and termination invariants.
    pub fn validate(&self) -> Result<()> {
        for pair in self.transitions.windows(2) {
            if pair[0].s_next != pair[1].s {
                return Err(Error::Contract(format!(
                    "episode breaks at s_next={} followed by s={}",
                    pair[0].s_next, pair[1].s
                )));
            }
        }
        match self.transitions.last() {
            Some(last) if last.done => Ok(()),
            Some(_) => Err(Error::Contract("episode does not end in a terminal transition".into())),
            None => Err(Error::Contract("empty episode".into())),
        }
    }
}

/// Matrix form of an environment under a fixed policy: transition matrix
/// with absorbing terminal rows, expected one-step rewards, and a mask that
/// is `true` on non-terminal states.
#[derive(Debug, Clone)]
pub struct MatrixForm {
    pub p_pi: DMatrix<f64>,
    pub r_bar: DVector<f64>,
    pub nonterminal: Vec<bool>,
}

/// Finite Markov reward process. Terminal rows are absorbing self-loops so
/// the matrix form is well defined even at gamma = 1.
#[derive(Debug, Clone)]
pub struct MrpSpec {
    pub n_states: usize,
    /// Row-stochastic `n_states x n_states` transition matrix.
    pub transition: DMatrix<f64>,
    /// Expected reward for each realized (s, s') pair.
    pub reward: DMatrix<f64>,
    pub terminal: BTreeSet<usize>,
    pub start: DVector<f64>,
}

impl MrpSpec {
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal.contains(&s)
    }

    /// Checks stochasticity, start-distribution, and absorbing-terminal
    /// invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_states;
        if self.transition.shape() != (n, n) || self.reward.shape() != (n, n) {
            return Err(Error::InvalidSpec("transition/reward shape mismatch".into()));
        }
        if self.start.len() != n {
            return Err(Error::InvalidSpec("start vector length mismatch".into()));
        }
        validate_rows(&self.transition, &self.terminal)?;
        if (self.start.sum() - 1.0).abs() > ROW_SUM_TOL || self.start.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidSpec("start is not a probability vector".into()));
        }
        for s in 0..n {
            if self.start[s] > 0.0 && self.is_terminal(s) {
                return Err(Error::InvalidSpec(format!("start state {s} is terminal")));
            }
        }
        Ok(())
    }

    /// Samples one transition from a non-terminal state.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Result<Transition> {
        if self.is_terminal(s) {
            return Err(Error::Contract(format!("step from terminal state {s}")));
        }
        let s_next = sample_categorical(self.transition.row(s).iter().copied(), rng);
        Ok(Transition {
            s,
            a: None,
            r: self.reward[(s, s_next)],
            s_next,
            done: self.is_terminal(s_next),
        })
    }

    /// Samples a start state from the start distribution.
    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(self.start.iter().copied(), rng)
    }

    /// Rolls out one full episode; errors if it fails to terminate within
    /// `max_steps`.
    pub fn sample_episode<R: Rng + ?Sized>(&self, rng: &mut R, max_steps: usize) -> Result<Episode> {
        let mut transitions = Vec::new();
        let mut s = self.sample_start(rng);
        for _ in 0..max_steps {
            let t = self.step(s, rng)?;
            let done = t.done;
            s = t.s_next;
            transitions.push(t);
            if done {
                return Ok(Episode { transitions });
            }
        }
        Err(Error::Contract(format!("episode did not terminate within {max_steps} steps")))
    }

    pub fn matrix_form(&self) -> MatrixForm {
        let n = self.n_states;
        let mut r_bar = DVector::zeros(n);
        for s in 0..n {
            if !self.is_terminal(s) {
                r_bar[s] = self.transition.row(s).iter().enumerate().map(|(j, p)| p * self.reward[(s, j)]).sum();
            }
        }
        MatrixForm {
            p_pi: self.transition.clone(),
            r_bar,
            nonterminal: (0..n).map(|s| !self.is_terminal(s)).collect(),
        }
    }

    /// Exact state values: solves (I - gamma P) v = r_bar over non-terminal
    /// states; terminal values are 0.
    pub fn true_values(&self, gamma: f64) -> Result<DVector<f64>> {
        let form = self.matrix_form();
        true_values_from(&form, gamma)
    }
}

/// Finite MDP with one row-stochastic transition matrix per action.
#[derive(Debug, Clone)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<DMatrix<f64>>,
    /// Expected reward per (s, a).
    pub reward: DMatrix<f64>,
    pub terminal: BTreeSet<usize>,
    pub start: DVector<f64>,
}

impl MdpSpec {
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal.contains(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states;
        if self.transition.len() != self.n_actions {
            return Err(Error::InvalidSpec("one transition matrix per action required".into()));
        }
        for p_a in &self.transition {
            if p_a.shape() != (n, n) {
                return Err(Error::InvalidSpec("transition shape mismatch".into()));
            }
            validate_rows(p_a, &self.terminal)?;
        }
        if self.reward.shape() != (n, self.n_actions) {
            return Err(Error::InvalidSpec("reward shape mismatch".into()));
        }
        if (self.start.sum() - 1.0).abs() > ROW_SUM_TOL || self.start.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidSpec("start is not a probability vector".into()));
        }
        for s in 0..n {
            if self.start[s] > 0.0 && self.is_terminal(s) {
                return Err(Error::InvalidSpec(format!("start state {s} is terminal")));
            }
        }
        Ok(())
    }

    /// Samples one transition for the given action.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<Transition> {
        if self.is_terminal(s) {
            return Err(Error::Contract(format!("step from terminal state {s}")));
        }
        if a >= self.n_actions {
            return Err(Error::Contract(format!("action {a} out of range")));
        }
        let s_next = sample_categorical(self.transition[a].row(s).iter().copied(), rng);
        Ok(Transition {
            s,
            a: Some(a),
            r: self.reward[(s, a)],
            s_next,
            done: self.is_terminal(s_next),
        })
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(self.start.iter().copied(), rng)
    }

    /// Folds a per-state action distribution into the MRP matrix form.
    pub fn matrix_form(&self, policy: &DMatrix<f64>) -> Result<MatrixForm> {
        let n = self.n_states;
        if policy.shape() != (n, self.n_actions) {
            return Err(Error::InvalidPolicy("policy shape mismatch".into()));
        }
        let mut p_pi = DMatrix::zeros(n, n);
        let mut r_bar = DVector::zeros(n);
        for s in 0..n {
            if self.is_terminal(s) {
                p_pi[(s, s)] = 1.0;
                continue;
            }
            let row = policy.row(s);
            if (row.sum() - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|p| *p < 0.0) {
                return Err(Error::InvalidPolicy(format!("policy row {s} is not a distribution")));
            }
            for a in 0..self.n_actions {
                let pa = row[a];
                if pa == 0.0 {
                    continue;
                }
                r_bar[s] += pa * self.reward[(s, a)];
                for j in 0..n {
                    p_pi[(s, j)] += pa * self.transition[a][(s, j)];
                }
            }
        }
        Ok(MatrixForm {
            p_pi,
            r_bar,
            nonterminal: (0..n).map(|s| !self.is_terminal(s)).collect(),
        })
    }

    pub fn true_values(&self, policy: &DMatrix<f64>, gamma: f64) -> Result<DVector<f64>> {
        let form = self.matrix_form(policy)?;
        true_values_from(&form, gamma)
    }

    /// Uniform-random policy, a common behavior baseline.
    pub fn uniform_policy(&self) -> DMatrix<f64> {
        DMatrix::from_element(self.n_states, self.n_actions, 1.0 / self.n_actions as f64)
    }
}

/// Either kind of environment, as produced by the config parser.
#[derive(Debug, Clone)]
pub enum EnvSpec {
    Mrp(MrpSpec),
    Mdp(MdpSpec),
}

fn validate_rows(p: &DMatrix<f64>, terminal: &BTreeSet<usize>) -> Result<()> {
    for s in 0..p.nrows() {
        let row = p.row(s);
        if row.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidSpec(format!("negative transition probability in row {s}")));
        }
        if (row.sum() - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidSpec(format!("row {s} sums to {}, expected 1", row.sum())));
        }
        if terminal.contains(&s) && (p[(s, s)] - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidSpec(format!("terminal row {s} is not absorbing")));
        }
    }
    Ok(())
}

fn sample_categorical<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    // u landed in the rounding slack at the top of the CDF.
    last_positive
}

fn true_values_from(form: &MatrixForm, gamma: f64) -> Result<DVector<f64>> {
    let nt: Vec<usize> =
        (0..form.nonterminal.len()).filter(|&s| form.nonterminal[s]).collect();
    let m = nt.len();
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for (i, &s) in nt.iter().enumerate() {
        for (j, &t) in nt.iter().enumerate() {
            a[(i, j)] = ((i == j) as u8 as f64) - gamma * form.p_pi[(s, t)];
        }
        b[i] = form.r_bar[s];
    }
    let v_nt = a
        .clone()
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NoSolution("value system is singular".into()))?;
    let residual = (&a * &v_nt - &b).amax();
    if !v_nt.iter().all(|x| x.is_finite()) || residual > 1e-8 {
        return Err(Error::NoSolution(format!("value solve unreliable (residual {residual:.3e})")));
    }
    let mut v = DVector::zeros(form.nonterminal.len());
    for (i, &s) in nt.iter().enumerate() {
        v[s] = v_nt[i];
    }
    Ok(v)
}

/// Deterministic chain: states 0..n-1 walk right one step per transition,
/// reward +1 on the final transition into the single terminal state n.
/// Start is state 0.
pub fn build_deterministic_chain(n: usize) -> Result<MrpSpec> {
    if n < 2 {
        return Err(Error::InvalidSpec(format!("chain needs at least 2 states, got {n}")));
    }
    let total = n + 1;
    let mut transition = DMatrix::zeros(total, total);
    let mut reward = DMatrix::zeros(total, total);
    for s in 0..n {
        transition[(s, s + 1)] = 1.0;
    }
    transition[(n, n)] = 1.0;
    reward[(n - 1, n)] = 1.0;
    let mut start = DVector::zeros(total);
    start[0] = 1.0;
    let spec = MrpSpec {
        n_states: total,
        transition,
        reward,
        terminal: BTreeSet::from([n]),
        start,
    };
    spec.validate()?;
    Ok(spec)
}

/// Symmetric random walk: states 0..n-1 move left/right with probability
/// 1/2; state indices n and n+1 are the left and right terminals. Entering
/// the right terminal pays +1. Start is the center state.
pub fn build_random_walk(n: usize) -> Result<MrpSpec> {
    if n < 3 || n.is_multiple_of(2) {
        return Err(Error::InvalidSpec(format!("walk needs an odd n >= 3, got {n}")));
    }
    let left = n;
    let right = n + 1;
    let total = n + 2;
    let mut transition = DMatrix::zeros(total, total);
    let mut reward = DMatrix::zeros(total, total);
    for s in 0..n {
        let to_left = if s == 0 { left } else { s - 1 };
        let to_right = if s == n - 1 { right } else { s + 1 };
        transition[(s, to_left)] = 0.5;
        transition[(s, to_right)] = 0.5;
    }
    transition[(left, left)] = 1.0;
    transition[(right, right)] = 1.0;
    reward[(n - 1, right)] = 1.0;
    let mut start = DVector::zeros(total);
    start[(n - 1) / 2] = 1.0;
    let spec = MrpSpec {
        n_states: total,
        transition,
        reward,
        terminal: BTreeSet::from([left, right]),
        start,
    };
    spec.validate()?;
    Ok(spec)
}

/// Gridworld actions in index order.
pub const GRID_ACTIONS: [&str; 4] = ["up", "down", "left", "right"];

/// Deterministic gridworld on a width x height board, state index
/// `y * width + x`. Four actions (up/down/left/right); bumping a wall stays
/// in place. Entering the goal pays `goal_reward` and terminates; every
/// other transition pays `step_reward`. Start is uniform over non-goal
/// cells.
pub fn build_gridworld(
    width: usize,
    height: usize,
    goal: (usize, usize),
    step_reward: f64,
    goal_reward: f64,
) -> Result<MdpSpec> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidSpec("gridworld needs positive dimensions".into()));
    }
    let (gx, gy) = goal;
    if gx >= width || gy >= height {
        return Err(Error::InvalidSpec(format!(
            "goal ({gx},{gy}) outside {width}x{height} grid"
        )));
    }
    let n = width * height;
    let goal_idx = gy * width + gx;
    let n_actions = 4;
    let mut transition = vec![DMatrix::zeros(n, n); n_actions];
    let mut reward = DMatrix::zeros(n, n_actions);
    for y in 0..height {
        for x in 0..width {
            let s = y * width + x;
            if s == goal_idx {
                for p_a in transition.iter_mut() {
                    p_a[(s, s)] = 1.0;
                }
                continue;
            }
            for (a, (dx, dy)) in [(0, -1), (0, 1), (-1, 0), (1, 0)].into_iter().enumerate() {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                let s_next = if nx < 0 || nx >= width as isize || ny < 0 || ny >= height as isize {
                    s
                } else {
                    ny as usize * width + nx as usize
                };
                transition[a][(s, s_next)] = 1.0;
                reward[(s, a)] = if s_next == goal_idx { goal_reward } else { step_reward };
            }
        }
    }
    let start_p = 1.0 / (n - 1) as f64;
    let start = DVector::from_fn(n, |s, _| if s == goal_idx { 0.0 } else { start_p });
    let spec = MdpSpec {
        n_states: n,
        n_actions,
        transition,
        reward,
        terminal: BTreeSet::from([goal_idx]),
        start,
    };
    spec.validate()?;
    Ok(spec)
}

/// Builds an environment from `key=value` lines. Recognized keys:
/// `env` (det-chain | random-walk | gridworld), `n`, `width`, `height`,
/// `goal_x`, `goal_y`, `step_reward`, `goal_reward`. Blank lines and
/// `#` comments are skipped.
pub fn parse_env_config(text: &str) -> Result<EnvSpec> {
    let mut kv = std::collections::BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidSpec(format!("line {}: expected key=value", lineno + 1)))?;
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    let env = kv
        .remove("env")
        .ok_or_else(|| Error::InvalidSpec("missing required key `env`".into()))?;
    let parse_usize = |kv: &mut std::collections::BTreeMap<String, String>, key: &str, default: usize| -> Result<usize> {
        match kv.remove(key) {
            Some(v) => v.parse().map_err(|_| Error::InvalidSpec(format!("bad integer for `{key}`: {v}"))),
            None => Ok(default),
        }
    };
    let parse_f64 = |kv: &mut std::collections::BTreeMap<String, String>, key: &str, default: f64| -> Result<f64> {
        match kv.remove(key) {
            Some(v) => v.parse().map_err(|_| Error::InvalidSpec(format!("bad number for `{key}`: {v}"))),
            None => Ok(default),
        }
    };
    let spec = match env.as_str() {
        "det-chain" => {
            let n = parse_usize(&mut kv, "n", 16)?;
            EnvSpec::Mrp(build_deterministic_chain(n)?)
        }
        "random-walk" => {
            let n = parse_usize(&mut kv, "n", 19)?;
            EnvSpec::Mrp(build_random_walk(n)?)
        }
        "gridworld" => {
            let width = parse_usize(&mut kv, "width", 5)?;
            let height = parse_usize(&mut kv, "height", 5)?;
            let goal_x = parse_usize(&mut kv, "goal_x", width.saturating_sub(1))?;
            let goal_y = parse_usize(&mut kv, "goal_y", height.saturating_sub(1))?;
            let step_reward = parse_f64(&mut kv, "step_reward", 0.0)?;
            let goal_reward = parse_f64(&mut kv, "goal_reward", 1.0)?;
            EnvSpec::Mdp(build_gridworld(width, height, (goal_x, goal_y), step_reward, goal_reward)?)
        }
        other => return Err(Error::InvalidSpec(format!("unknown env `{other}`"))),
    };
    if let Some(key) = kv.keys().next() {
        return Err(Error::InvalidSpec(format!("unknown key `{key}`")));
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chain_structure() {
        let spec = build_deterministic_chain(16).unwrap();
        assert_eq!(spec.n_states, 17);
        assert!(spec.is_terminal(16));
        assert_eq!(spec.start[0], 1.0);
        // Reward only on the final transition.
        assert_eq!(spec.reward[(15, 16)], 1.0);
        assert_eq!(spec.reward.sum(), 1.0);
        assert!(build_deterministic_chain(1).is_err());
    }

    #[test]
    fn chain_smallest_episode() {
        let spec = build_deterministic_chain(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = spec.sample_episode(&mut rng, 10).unwrap();
        let rewards: Vec<f64> = ep.transitions.iter().map(|t| t.r).collect();
        assert_eq!(rewards, vec![0.0, 1.0]);
        ep.validate().unwrap();
    }

    #[test]
    fn chain_true_values() {
        let spec = build_deterministic_chain(16).unwrap();
        let v = spec.true_values(0.9999).unwrap();
        assert!((v[0] - 0.9999f64.powi(15)).abs() < 1e-12);
        assert!((v[15] - 1.0).abs() < 1e-12);
        assert_eq!(v[16], 0.0);
    }

    #[test]
    fn chain_final_step_pays_one() {
        let spec = build_deterministic_chain(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = spec.step(15, &mut rng).unwrap();
        assert_eq!(t.s_next, 16);
        assert_eq!(t.r, 1.0);
        assert!(t.done);
    }

    #[test]
    fn walk_structure() {
        let spec = build_random_walk(19).unwrap();
        assert_eq!(spec.n_states, 21);
        assert_eq!(spec.start[9], 1.0);
        assert!(build_random_walk(4).is_err());
        assert!(build_random_walk(1).is_err());
        // Tridiagonal interior.
        let form = spec.matrix_form();
        for s in 1..18 {
            assert_eq!(form.p_pi[(s, s - 1)], 0.5);
            assert_eq!(form.p_pi[(s, s + 1)], 0.5);
        }
    }

    #[test]
    fn walk_true_values() {
        let spec = build_random_walk(3).unwrap();
        let v = spec.true_values(1.0).unwrap();
        assert!((v[1] - 0.5).abs() < 1e-12);

        let spec = build_random_walk(19).unwrap();
        let v = spec.true_values(1.0).unwrap();
        for i in 0..19 {
            assert!((v[i] - (i + 1) as f64 / 20.0).abs() < 1e-10, "state {i}: {}", v[i]);
        }
    }

    #[test]
    fn gamma_zero_values_equal_expected_rewards() {
        let spec = build_random_walk(5).unwrap();
        let v = spec.true_values(0.0).unwrap();
        let form = spec.matrix_form();
        for s in 0..spec.n_states {
            assert!((v[s] - form.r_bar[s]).abs() < 1e-15);
        }
    }

    #[test]
    fn step_from_terminal_rejected() {
        let spec = build_deterministic_chain(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(spec.step(2, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn gridworld_wall_bump() {
        let spec = build_gridworld(5, 5, (4, 4), 0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Up from the top-left corner stays put.
        let t = spec.step(0, 0, &mut rng).unwrap();
        assert_eq!(t.s_next, 0);
        assert!(!t.done);
    }

    #[test]
    fn gridworld_one_step_goal() {
        let spec = build_gridworld(2, 1, (1, 0), 0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Right from the only start cell enters the goal.
        let t = spec.step(0, 3, &mut rng).unwrap();
        assert_eq!(t.r, 1.0);
        assert!(t.done);
    }

    #[test]
    fn gridworld_goal_outside_rejected() {
        assert!(build_gridworld(5, 5, (5, 0), 0.0, 1.0).is_err());
    }

    #[test]
    fn gridworld_uniform_policy_rows_stochastic() {
        let spec = build_gridworld(5, 5, (4, 4), -0.01, 1.0).unwrap();
        let form = spec.matrix_form(&spec.uniform_policy()).unwrap();
        for s in 0..spec.n_states {
            assert!((form.p_pi.row(s).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_parser_round_trip() {
        let spec = parse_env_config("env=random-walk\nn=19\n").unwrap();
        match spec {
            EnvSpec::Mrp(m) => assert_eq!(m.n_states, 21),
            _ => panic!("expected an MRP"),
        }
        let spec = parse_env_config("# comment\nenv=gridworld\nwidth=3\nheight=2\n").unwrap();
        match spec {
            EnvSpec::Mdp(m) => {
                assert_eq!(m.n_states, 6);
                assert!(m.is_terminal(5));
            }
            _ => panic!("expected an MDP"),
        }
        assert!(parse_env_config("env=mars-rover\n").is_err());
        assert!(parse_env_config("n=19\n").is_err());
        assert!(parse_env_config("env=random-walk\nbogus=1\n").is_err());
    }
}
