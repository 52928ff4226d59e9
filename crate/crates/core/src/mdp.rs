//! Exact finite-MDP machinery.
//!
//! State-action pairs are flattened as `s * n_actions + a` everywhere in the
//! crate. Values, occupancies and kernels are computed by dense LU solves; the
//! target sizes are a few thousand state-action pairs at most.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// Finite discounted MDP with a dense transition tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `[s][a][s']`, flattened.
    transition: Vec<f64>,
    /// `[s][a]`, flattened.
    reward: Vec<f64>,
    mu0: Vec<f64>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        mu0: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidArgument(
                "an MDP needs at least one state and one action".into(),
            ));
        }
        let n_sa = n_states * n_actions;
        if transition.len() != n_sa * n_states {
            return Err(Error::InvalidArgument(format!(
                "transition tensor has {} entries, expected {}",
                transition.len(),
                n_sa * n_states
            )));
        }
        if reward.len() != n_sa || mu0.len() != n_states {
            return Err(Error::InvalidArgument(
                "reward or mu0 has the wrong length".into(),
            ));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie in (0, 1), got {gamma}"
            )));
        }
        for (sa, row) in transition.chunks(n_states).enumerate() {
            check_distribution(row, ROW_TOL).map_err(|msg| {
                Error::InvalidArgument(format!(
                    "transition row (state {}, action {}): {msg}",
                    sa / n_actions,
                    sa % n_actions
                ))
            })?;
        }
        if let Some(r) = reward.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::InvalidArgument(format!(
                "reward {r} outside [0, 1]"
            )));
        }
        check_distribution(&mu0, ROW_TOL)
            .map_err(|msg| Error::InvalidArgument(format!("mu0: {msg}")))?;
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            mu0,
            gamma,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    /// Reward table flattened over state-action pairs.
    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    /// Next-state distribution `P(. | s, a)`.
    pub fn next_state_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            self.mu0.clone(),
            gamma,
        )
    }

    pub fn with_reward(&self, reward: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            reward,
            self.mu0.clone(),
            self.gamma,
        )
    }

    /// State transition matrix `P_pi(s' | s)` under a policy.
    pub fn state_kernel(&self, policy: &Policy) -> DMatrix<f64> {
        let ns = self.n_states;
        let mut p = DMatrix::zeros(ns, ns);
        for s in 0..ns {
            for a in 0..self.n_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for (s2, &p_next) in self.next_state_dist(s, a).iter().enumerate() {
                    p[(s, s2)] += pa * p_next;
                }
            }
        }
        p
    }

    fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(Error::InvalidArgument(format!(
                "policy shape {}x{} does not match MDP shape {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }
}

/// Stationary Markovian policy `pi(a | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || probs.len() != n_states * n_actions {
            return Err(Error::InvalidArgument(format!(
                "policy table has {} entries for a {n_states}x{n_actions} shape",
                probs.len()
            )));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row, ROW_TOL)
                .map_err(|msg| Error::InvalidArgument(format!("policy row {s}: {msg}")))?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        Self::epsilon_greedy(n_actions, actions, 0.0)
    }

    /// Mixes a deterministic choice with the uniform policy:
    /// `pi(a|s) = (1 - eps) 1[a = greedy(s)] + eps / |A|`.
    pub fn epsilon_greedy(n_actions: usize, greedy: &[usize], epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in [0, 1], got {epsilon}"
            )));
        }
        if n_actions == 0 || greedy.iter().any(|&a| a >= n_actions) {
            return Err(Error::InvalidArgument("greedy action out of range".into()));
        }
        let mut probs = vec![epsilon / n_actions as f64; greedy.len() * n_actions];
        for (s, &a) in greedy.iter().enumerate() {
            probs[s * n_actions + a] += 1.0 - epsilon;
        }
        Self::new(greedy.len(), n_actions, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(s), rng)
    }

    /// Total-variation-style l1 distance summed over states.
    pub fn l1_distance(&self, other: &Policy) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| (p - q).abs())
            .sum()
    }
}

/// A bag of `(s, a, s')` transitions collected under a behavior policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub transitions: Vec<Transition>,
    pub gamma_used: f64,
    pub behavior_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn with_behavior_id(mut self, id: impl Into<String>) -> Self {
        self.behavior_id = id.into();
        self
    }

    /// Checks that every index fits the given shape.
    pub fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        match self
            .transitions
            .iter()
            .position(|t| t.s >= n_states || t.a >= n_actions || t.s_next >= n_states)
        {
            Some(i) => Err(Error::InvalidArgument(format!(
                "transition {i} has an index outside the {n_states}x{n_actions} shape"
            ))),
            None => Ok(()),
        }
    }

    /// Empirical frequency of each state-action pair.
    pub fn pair_frequencies(&self, n_states: usize, n_actions: usize) -> Vec<f64> {
        let mut freq = vec![0.0; n_states * n_actions];
        if self.transitions.is_empty() {
            return freq;
        }
        let w = 1.0 / self.transitions.len() as f64;
        for t in &self.transitions {
            freq[t.s * n_actions + t.a] += w;
        }
        freq
    }
}

/// Fixed-horizon trajectories, used by trajectory-wise importance sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Vec<Step>>,
    pub horizon: usize,
    pub gamma_used: f64,
    pub behavior_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

impl TrajectoryDataset {
    /// Flattens every step into a transition bag (the truncated-trajectory
    /// collection protocol). The `(s, a)` marginal is only approximately the
    /// discounted occupancy.
    pub fn to_transitions(&self) -> TransitionDataset {
        TransitionDataset {
            transitions: self
                .trajectories
                .iter()
                .flatten()
                .map(|st| Transition {
                    s: st.s,
                    a: st.a,
                    s_next: st.s_next,
                })
                .collect(),
            gamma_used: self.gamma_used,
            behavior_id: self.behavior_id.clone(),
            seed: self.seed,
        }
    }
}

/// Normalized discounted state-action occupancy `d^pi(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl OccupancyTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn state_marginal(&self) -> Vec<f64> {
        self.values
            .chunks(self.n_actions)
            .map(|row| row.iter().sum())
            .collect()
    }
}

/// Solves `d = (1 - gamma) mu0 x pi + gamma (P^pi)^T d` for the discounted
/// occupancy. The solve is done on the state marginal and lifted with `pi`.
pub fn occupancy_measure(mdp: &TabularMdp, policy: &Policy) -> Result<OccupancyTable> {
    mdp.check_policy(policy)?;
    let ns = mdp.n_states();
    let gamma = mdp.gamma();
    let p = mdp.state_kernel(policy);
    let lhs = DMatrix::<f64>::identity(ns, ns) - p.transpose() * gamma;
    let rhs = DVector::from_iterator(ns, mdp.mu0().iter().map(|m| (1.0 - gamma) * m));
    let d_state = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("occupancy system".into()))?;
    let na = mdp.n_actions();
    let mut values = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            // Round-off can leave -1e-17 on unreachable states.
            values[s * na + a] = (d_state[s] * policy.prob(s, a)).max(0.0);
        }
    }
    Ok(OccupancyTable {
        n_states: ns,
        n_actions: na,
        values,
    })
}

/// Solves `Q = r + gamma P^pi Q` over state-action pairs.
pub fn q_values(mdp: &TabularMdp, policy: &Policy) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let gamma = mdp.gamma();
    let p = mdp.state_kernel(policy);
    let r_pi = DVector::from_iterator(
        ns,
        (0..ns).map(|s| (0..na).map(|a| policy.prob(s, a) * mdp.reward(s, a)).sum()),
    );
    let lhs = DMatrix::<f64>::identity(ns, ns) - p * gamma;
    let v = lhs
        .lu()
        .solve(&r_pi)
        .ok_or_else(|| Error::Singular("policy evaluation system".into()))?;
    let mut q = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let next: f64 = mdp
                .next_state_dist(s, a)
                .iter()
                .zip(v.iter())
                .map(|(p, v)| p * v)
                .sum();
            q[s * na + a] = mdp.reward(s, a) + gamma * next;
        }
    }
    Ok(q)
}

/// Normalized policy value `(1 - gamma) E_{s~mu0, a~pi}[Q(s, a)]`.
pub fn policy_value_exact(mdp: &TabularMdp, policy: &Policy) -> Result<f64> {
    let q = q_values(mdp, policy)?;
    let na = mdp.n_actions();
    let mut rho = 0.0;
    for (s, &m) in mdp.mu0().iter().enumerate() {
        for a in 0..na {
            rho += m * policy.prob(s, a) * q[s * na + a];
        }
    }
    Ok((1.0 - mdp.gamma()) * rho)
}

/// Initial state-action distribution `mu0(s) pi(a|s)`.
pub fn initial_pair_distribution(mu0: &[f64], policy: &Policy) -> Vec<f64> {
    let na = policy.n_actions();
    let mut nu = vec![0.0; mu0.len() * na];
    for (s, &m) in mu0.iter().enumerate() {
        for a in 0..na {
            nu[s * na + a] = m * policy.prob(s, a);
        }
    }
    nu
}

/// The state-action kernel `P^pi((s',a') | (s,a)) = P(s'|s,a) pi(a'|s')` as a
/// dense `n_pairs x n_pairs` matrix.
pub fn state_action_kernel(mdp: &TabularMdp, policy: &Policy) -> Result<DMatrix<f64>> {
    mdp.check_policy(policy)?;
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let n = ns * na;
    let mut k = DMatrix::zeros(n, n);
    for s in 0..ns {
        for a in 0..na {
            let row = s * na + a;
            for (s2, &p) in mdp.next_state_dist(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for a2 in 0..na {
                    k[(row, s2 * na + a2)] = p * policy.prob(s2, a2);
                }
            }
        }
    }
    Ok(k)
}

/// Value of a Markov chain on state-action pairs: solves `Q = r + gamma K Q`
/// and returns `(Q, (1 - gamma) nu0^T Q)`.
pub fn chain_value(
    kernel: &DMatrix<f64>,
    rewards: &[f64],
    nu0: &[f64],
    gamma: f64,
) -> Result<(Vec<f64>, f64)> {
    let n = kernel.nrows();
    if kernel.ncols() != n || rewards.len() != n || nu0.len() != n {
        return Err(Error::InvalidArgument("chain dimensions disagree".into()));
    }
    let lhs = DMatrix::<f64>::identity(n, n) - kernel * gamma;
    let q = lhs
        .lu()
        .solve(&DVector::from_column_slice(rewards))
        .ok_or_else(|| Error::Singular("state-action chain evaluation".into()))?;
    let rho = (1.0 - gamma) * q.iter().zip(nu0).map(|(q, n)| q * n).sum::<f64>();
    Ok((q.as_slice().to_vec(), rho))
}

/// Discounted occupancy of a Markov chain on state-action pairs.
pub fn chain_occupancy(kernel: &DMatrix<f64>, nu0: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let n = kernel.nrows();
    if kernel.ncols() != n || nu0.len() != n {
        return Err(Error::InvalidArgument("chain dimensions disagree".into()));
    }
    let lhs = DMatrix::<f64>::identity(n, n) - kernel.transpose() * gamma;
    let rhs = DVector::from_iterator(n, nu0.iter().map(|v| (1.0 - gamma) * v));
    lhs.lu()
        .solve(&rhs)
        .map(|d| d.as_slice().to_vec())
        .ok_or_else(|| Error::Singular("state-action chain occupancy".into()))
}

/// `C_inf = max d^pi / d^{pi_b}` over pairs the target visits. Pairs neither
/// policy visits are skipped; pairs only the target visits are a coverage
/// error.
pub fn concentratability(mdp: &TabularMdp, target: &Policy, behavior: &Policy) -> Result<f64> {
    let d_pi = occupancy_measure(mdp, target)?;
    let d_b = occupancy_measure(mdp, behavior)?;
    occupancy_ratio_max(&d_pi, &d_b)
}

pub(crate) fn occupancy_ratio_max(d_pi: &OccupancyTable, d_b: &OccupancyTable) -> Result<f64> {
    let na = d_pi.n_actions;
    let mut c = 0.0f64;
    for (i, (&t, &b)) in d_pi.values.iter().zip(&d_b.values).enumerate() {
        if t <= 0.0 {
            continue;
        }
        if b <= 0.0 {
            return Err(Error::Coverage {
                state: i / na,
                action: i % na,
                target_mass: t,
            });
        }
        c = c.max(t / b);
    }
    Ok(c)
}

/// Draws `n` i.i.d. transitions whose `(s, a)` marginal is the discounted
/// occupancy of `behavior`: each sample rolls out `t ~ Geometric(1 - gamma)`
/// steps from `mu0` and records `(s_t, a_t, s_{t+1})`.
pub fn sample_dataset(
    mdp: &TabularMdp,
    behavior: &Policy,
    n: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    mdp.check_policy(behavior)?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "dataset size must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = Geometric::new(1.0 - mdp.gamma())
        .map_err(|e| Error::InvalidArgument(format!("geometric horizon: {e}")))?;
    let mut transitions = Vec::with_capacity(n);
    for _ in 0..n {
        let t = horizon.sample(&mut rng);
        let mut s = sample_categorical(mdp.mu0(), &mut rng);
        for _ in 0..t {
            let a = behavior.sample(s, &mut rng);
            s = sample_categorical(mdp.next_state_dist(s, a), &mut rng);
        }
        let a = behavior.sample(s, &mut rng);
        let s_next = sample_categorical(mdp.next_state_dist(s, a), &mut rng);
        transitions.push(Transition { s, a, s_next });
    }
    Ok(TransitionDataset {
        transitions,
        gamma_used: mdp.gamma(),
        behavior_id: String::from("behavior"),
        seed,
    })
}

/// Collects `n_traj` trajectories of fixed length `horizon` from `mu0`.
pub fn sample_trajectories(
    mdp: &TabularMdp,
    behavior: &Policy,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    mdp.check_policy(behavior)?;
    if n_traj == 0 || horizon == 0 {
        return Err(Error::InvalidArgument(
            "trajectory count and horizon must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectories = (0..n_traj)
        .map(|_| {
            let mut s = sample_categorical(mdp.mu0(), &mut rng);
            (0..horizon)
                .map(|_| {
                    let a = behavior.sample(s, &mut rng);
                    let s_next = sample_categorical(mdp.next_state_dist(s, a), &mut rng);
                    let step = Step {
                        s,
                        a,
                        r: mdp.reward(s, a),
                        s_next,
                    };
                    s = s_next;
                    step
                })
                .collect()
        })
        .collect();
    Ok(TrajectoryDataset {
        trajectories,
        horizon,
        gamma_used: mdp.gamma(),
        behavior_id: String::from("behavior"),
        seed,
    })
}

/// Optimal action per state by value iteration (ties go to the lowest index).
pub fn greedy_optimal_actions(mdp: &TabularMdp, tol: f64) -> Vec<usize> {
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let gamma = mdp.gamma();
    let mut v = vec![0.0; ns];
    let q_of = |v: &[f64], s: usize, a: usize| {
        mdp.reward(s, a)
            + gamma
                * mdp
                    .next_state_dist(s, a)
                    .iter()
                    .zip(v)
                    .map(|(p, v)| p * v)
                    .sum::<f64>()
    };
    loop {
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| q_of(&v, s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if delta < tol {
            break;
        }
    }
    (0..ns)
        .map(|s| {
            let mut best = 0;
            let mut best_q = f64::NEG_INFINITY;
            for a in 0..na {
                let q = q_of(&v, s, a);
                if q > best_q + 1e-12 {
                    best = a;
                    best_q = q;
                }
            }
            best
        })
        .collect()
}

/// Inverse-CDF draw from a discrete distribution.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

fn check_distribution(row: &[f64], tol: f64) -> std::result::Result<(), String> {
    if let Some(x) = row.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(format!("entry {x} is negative or non-finite"));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(format!("entries sum to {total}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_mdp(ns: usize, na: usize, gamma: f64, seed: u64) -> TabularMdp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transition = Vec::with_capacity(ns * na * ns);
        for _ in 0..ns * na {
            let row: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = row.iter().sum();
            transition.extend(row.iter().map(|x| x / total));
        }
        let reward = (0..ns * na).map(|_| rng.random::<f64>()).collect();
        let mu0: Vec<f64> = {
            let raw: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() + 0.1).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|x| x / total).collect()
        };
        TabularMdp::new(ns, na, transition, reward, mu0, gamma).unwrap()
    }

    fn random_policy(ns: usize, na: usize, seed: u64) -> Policy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Vec::new();
        for _ in 0..ns {
            let row: Vec<f64> = (0..na).map(|_| rng.random::<f64>() + 0.1).collect();
            let total: f64 = row.iter().sum();
            probs.extend(row.iter().map(|x| x / total));
        }
        Policy::new(ns, na, probs).unwrap()
    }

    fn single_state(reward: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![reward], vec![1.0], gamma).unwrap()
    }

    #[test]
    fn rejects_invalid_tables() {
        assert!(TabularMdp::new(1, 1, vec![0.9], vec![0.0], vec![1.0], 0.9).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![1.5], vec![1.0], 0.9).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.5], vec![1.0], 1.0).is_err());
        assert!(TabularMdp::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], vec![0.7, 0.2], 0.5)
            .is_err());
        assert!(Policy::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(Policy::new(1, 2, vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn single_pair_occupancy_is_one() {
        for gamma in [0.1, 0.5, 0.99] {
            let mdp = single_state(0.3, gamma);
            let d = occupancy_measure(&mdp, &Policy::uniform(1, 1)).unwrap();
            assert_eq!(d.values.len(), 1);
            assert!((d.values[0] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn two_state_cycle_is_symmetric() {
        let mdp = TabularMdp::new(
            2,
            1,
            vec![0.0, 1.0, 1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
            0.5,
        )
        .unwrap();
        let d = occupancy_measure(&mdp, &Policy::uniform(2, 1)).unwrap();
        assert!((d.get(0, 0) - 0.5).abs() < 1e-14);
        assert!((d.get(1, 0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn occupancy_satisfies_stationarity_and_sums_to_one() {
        for seed in 0..5 {
            let mdp = random_mdp(6, 3, 0.9, seed);
            let pi = random_policy(6, 3, seed + 100);
            let d = occupancy_measure(&mdp, &pi).unwrap();
            let total: f64 = d.values.iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
            let k = state_action_kernel(&mdp, &pi).unwrap();
            let nu0 = initial_pair_distribution(mdp.mu0(), &pi);
            let dv = DVector::from_column_slice(&d.values);
            let rhs = k.transpose() * &dv * mdp.gamma()
                + DVector::from_iterator(nu0.len(), nu0.iter().map(|v| v * (1.0 - mdp.gamma())));
            assert!((rhs - dv).amax() < 1e-12);
            // independent route: the state-action chain solve
            let d2 = chain_occupancy(&k, &nu0, mdp.gamma()).unwrap();
            for (a, b) in d.values.iter().zip(&d2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn occupancy_matches_monte_carlo_rollouts() {
        let gamma = 0.7;
        let mdp = random_mdp(5, 2, gamma, 7);
        let pi = random_policy(5, 2, 8);
        let d = occupancy_measure(&mdp, &pi).unwrap();
        // Full discounted rollouts truncated where gamma^t < 1e-13.
        let horizon = 85;
        let n_roll = 1_000_000;
        let n = mdp.n_pairs();
        let mut sum = vec![0.0; n];
        let mut sum_sq = vec![0.0; n];
        let mut per = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..n_roll {
            per.iter_mut().for_each(|x| *x = 0.0);
            let mut s = sample_categorical(mdp.mu0(), &mut rng);
            let mut w = 1.0 - gamma;
            for _ in 0..horizon {
                let a = pi.sample(s, &mut rng);
                per[s * 2 + a] += w;
                w *= gamma;
                s = sample_categorical(mdp.next_state_dist(s, a), &mut rng);
            }
            for i in 0..n {
                sum[i] += per[i];
                sum_sq[i] += per[i] * per[i];
            }
        }
        let m = n_roll as f64;
        for i in 0..n {
            let mean = sum[i] / m;
            let se = ((sum_sq[i] / m - mean * mean) / m).sqrt();
            assert!(
                (mean - d.values[i]).abs() <= 3.0 * se,
                "pair {i}: mc {mean} exact {} se {se}",
                d.values[i]
            );
        }
    }

    #[test]
    fn value_edge_cases() {
        let mdp = random_mdp(4, 2, 0.8, 3);
        let pi = random_policy(4, 2, 4);
        let ones = mdp.with_reward(vec![1.0; 8]).unwrap();
        let zeros = mdp.with_reward(vec![0.0; 8]).unwrap();
        assert!((policy_value_exact(&ones, &pi).unwrap() - 1.0).abs() < 1e-12);
        assert!(policy_value_exact(&zeros, &pi).unwrap().abs() < 1e-15);
    }

    #[test]
    fn value_equals_occupancy_weighted_reward_and_bellman_holds() {
        for seed in 0..6 {
            let mdp = random_mdp(6, 3, 0.95, seed + 20);
            let pi = random_policy(6, 3, seed + 40);
            let rho = policy_value_exact(&mdp, &pi).unwrap();
            assert!((0.0..=1.0).contains(&rho));
            let d = occupancy_measure(&mdp, &pi).unwrap();
            let via_d: f64 = d.values.iter().zip(mdp.rewards()).map(|(d, r)| d * r).sum();
            assert!((rho - via_d).abs() <= 1e-10);

            let q = q_values(&mdp, &pi).unwrap();
            let k = state_action_kernel(&mdp, &pi).unwrap();
            let qv = DVector::from_column_slice(&q);
            let residual = DVector::from_column_slice(mdp.rewards()) + &k * &qv * mdp.gamma() - qv;
            assert!(residual.amax() <= 1e-10);
        }
    }

    #[test]
    fn kernel_rows_are_distributions() {
        let mdp = random_mdp(4, 2, 0.9, 11);
        let pi = random_policy(4, 2, 12);
        let k = state_action_kernel(&mdp, &pi).unwrap();
        for i in 0..k.nrows() {
            assert!((k.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_kernel_rows_are_one_hot() {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
            vec![0.0; 4],
            vec![1.0, 0.0],
            0.9,
        )
        .unwrap();
        let pi = Policy::deterministic(2, &[1, 0]).unwrap();
        let k = state_action_kernel(&mdp, &pi).unwrap();
        for i in 0..4 {
            let row = k.row(i);
            assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), 3);
        }
    }

    #[test]
    fn uniform_policy_kernel_halves_transition() {
        let mdp = random_mdp(3, 2, 0.9, 5);
        let k = state_action_kernel(&mdp, &Policy::uniform(3, 2)).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                for s2 in 0..3 {
                    for a2 in 0..2 {
                        let expect = mdp.next_state_dist(s, a)[s2] * 0.5;
                        assert!((k[(s * 2 + a, s2 * 2 + a2)] - expect).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_matches_simulated_steps() {
        let mdp = random_mdp(4, 2, 0.9, 13);
        let pi = random_policy(4, 2, 14);
        let k = state_action_kernel(&mdp, &pi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n_steps = 100_000;
        for &(s, a) in &[(0usize, 0usize), (2, 1), (3, 0)] {
            let mut counts = vec![0usize; 8];
            for _ in 0..n_steps {
                let s2 = sample_categorical(mdp.next_state_dist(s, a), &mut rng);
                let a2 = pi.sample(s2, &mut rng);
                counts[s2 * 2 + a2] += 1;
            }
            for (j, &c) in counts.iter().enumerate() {
                let p = k[(s * 2 + a, j)];
                let freq = c as f64 / n_steps as f64;
                let se = (p * (1.0 - p) / n_steps as f64).sqrt();
                assert!((freq - p).abs() <= 3.0 * se, "cell {j}: {freq} vs {p}");
            }
        }
    }

    #[test]
    fn sampling_rejects_empty_and_handles_single_state() {
        let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0], 0.9).unwrap();
        let pi = Policy::new(1, 2, vec![0.25, 0.75]).unwrap();
        assert!(matches!(
            sample_dataset(&mdp, &pi, 0, 1),
            Err(Error::InvalidArgument(_))
        ));
        let data = sample_dataset(&mdp, &pi, 100, 1).unwrap();
        assert_eq!(data.len(), 100);
        assert!(data.transitions.iter().all(|t| t.s == 0 && t.s_next == 0));
        let ones = data.transitions.iter().filter(|t| t.a == 1).count();
        assert!(ones > 50 && ones < 95);
    }

    #[test]
    fn sampling_is_reproducible() {
        let mdp = random_mdp(5, 2, 0.9, 21);
        let pi = random_policy(5, 2, 22);
        let a = sample_dataset(&mdp, &pi, 500, 42).unwrap();
        let b = sample_dataset(&mdp, &pi, 500, 42).unwrap();
        let c = sample_dataset(&mdp, &pi, 500, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.transitions, c.transitions);
    }

    #[test]
    fn sampled_pairs_follow_behavior_occupancy() {
        let mdp = random_mdp(5, 2, 0.9, 31);
        let pi = random_policy(5, 2, 32);
        let n = 100_000;
        let data = sample_dataset(&mdp, &pi, n, 33).unwrap();
        let d = occupancy_measure(&mdp, &pi).unwrap();
        let freq = data.pair_frequencies(5, 2);
        let mut chi2 = 0.0;
        for (f, p) in freq.iter().zip(&d.values) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() <= 3.0 * se, "{f} vs {p}");
            let expected = p * n as f64;
            chi2 += (f * n as f64 - expected).powi(2) / expected;
        }
        // chi-square 0.99 quantile with 9 degrees of freedom
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn concentratability_cases() {
        let mdp = random_mdp(4, 2, 0.9, 41);
        let pi = random_policy(4, 2, 42);
        assert!((concentratability(&mdp, &pi, &pi).unwrap() - 1.0).abs() < 1e-10);

        let one = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0], 0.9).unwrap();
        let target = Policy::deterministic(2, &[1]).unwrap();
        let c = concentratability(&one, &target, &Policy::uniform(1, 2)).unwrap();
        assert!((c - 2.0).abs() < 1e-12);

        let other = Policy::deterministic(2, &[0]).unwrap();
        assert!(matches!(
            concentratability(&one, &target, &other),
            Err(Error::Coverage { state: 0, action: 1, .. })
        ));
        // the reverse direction is never below one
        let c_rev = concentratability(&mdp, &random_policy(4, 2, 43), &pi).unwrap();
        assert!(c_rev >= 1.0);
    }

    #[test]
    fn trajectories_flatten_to_transitions() {
        let mdp = random_mdp(3, 2, 0.9, 51);
        let pi = random_policy(3, 2, 52);
        let traj = sample_trajectories(&mdp, &pi, 4, 25, 3).unwrap();
        assert_eq!(traj.trajectories.len(), 4);
        assert!(traj.trajectories.iter().all(|t| t.len() == 25));
        for t in &traj.trajectories {
            for w in t.windows(2) {
                assert_eq!(w[0].s_next, w[1].s);
            }
        }
        assert_eq!(traj.to_transitions().len(), 100);
    }
}
