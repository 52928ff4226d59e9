//! Benchmark environments: the Four Rooms gridworld and random low-rank MDPs
//! with known spectral factors.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::mdp::{greedy_optimal_actions, Policy, TabularMdp};

/// The classic four-room layout: an 11x11 interior inside a wall border.
const FOUR_ROOMS: [&str; 13] = [
    "wwwwwwwwwwwww",
    "w     w     w",
    "w     w     w",
    "w           w",
    "w     w     w",
    "w     w     w",
    "ww wwww     w",
    "w     www www",
    "w     w     w",
    "w     w     w",
    "w           w",
    "w     w     w",
    "wwwwwwwwwwwww",
];

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

/// Free cells of a gridworld, indexed row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    /// `(row, col)` of each state.
    pub cells: Vec<(usize, usize)>,
}

impl GridLayout {
    pub fn four_rooms() -> Self {
        let mut cells = Vec::new();
        for (r, line) in FOUR_ROOMS.iter().enumerate() {
            for (c, ch) in line.chars().enumerate() {
                if ch == ' ' {
                    cells.push((r, c));
                }
            }
        }
        Self {
            rows: FOUR_ROOMS.len(),
            cols: FOUR_ROOMS[0].len(),
            cells,
        }
    }

    pub fn n_states(&self) -> usize {
        self.cells.len()
    }

    pub fn state_at(&self, row: usize, col: usize) -> Option<usize> {
        self.cells.iter().position(|&cell| cell == (row, col))
    }

    fn step(&self, s: usize, action: usize) -> usize {
        let (r, c) = self.cells[s];
        let (nr, nc) = match action {
            UP => (r.wrapping_sub(1), c),
            DOWN => (r + 1, c),
            LEFT => (r, c.wrapping_sub(1)),
            _ => (r, c + 1),
        };
        self.state_at(nr, nc).unwrap_or(s)
    }
}

/// Goal used when none is configured: the bottom-right interior corner.
pub fn four_rooms_default_goal() -> usize {
    let layout = GridLayout::four_rooms();
    layout.state_at(11, 11).expect("corner cell is free")
}

/// Four Rooms: the intended move succeeds with probability `1 - noise`,
/// otherwise one of the other three directions is taken uniformly. Moves into
/// walls leave the agent in place. The goal is absorbing and pays reward 1 for
/// every action; all other rewards are 0. Episodes start uniformly over the
/// non-goal cells.
pub fn four_rooms(noise: f64, goal: usize, gamma: f64) -> Result<TabularMdp> {
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::InvalidArgument(format!(
            "noise must lie in [0, 1), got {noise}"
        )));
    }
    let layout = GridLayout::four_rooms();
    let ns = layout.n_states();
    if goal >= ns {
        return Err(Error::InvalidArgument(format!(
            "goal index {goal} outside 0..{ns}"
        )));
    }
    let na = 4;
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let row = &mut transition[(s * na + a) * ns..(s * na + a + 1) * ns];
            if s == goal {
                row[goal] = 1.0;
                reward[s * na + a] = 1.0;
                continue;
            }
            for dir in 0..na {
                let p = if dir == a { 1.0 - noise } else { noise / 3.0 };
                if p > 0.0 {
                    row[layout.step(s, dir)] += p;
                }
            }
        }
    }
    let start = 1.0 / (ns - 1) as f64;
    let mu0 = (0..ns).map(|s| if s == goal { 0.0 } else { start }).collect();
    TabularMdp::new(ns, na, transition, reward, mu0, gamma)
}

/// Ground-truth factors of a low-rank MDP:
/// `P(s' | s, a) = sum_k phi_star[(s,a), k] * w_star[k, s']`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankGroundTruth {
    /// `n_pairs x d`, rows on the probability simplex.
    pub phi_star: DMatrix<f64>,
    /// `d x n_states`, rows are next-state distributions.
    pub w_star: DMatrix<f64>,
    /// Mixture weights with `mu0 = w_star^T omega0`.
    pub omega0: Vec<f64>,
    /// Reward cofactor when the reward was made linear in `phi_star`.
    pub theta_r: Option<Vec<f64>>,
}

impl LowRankGroundTruth {
    pub fn rank(&self) -> usize {
        self.phi_star.ncols()
    }

    /// `n_pairs x n_states` transition matrix rebuilt from the factors.
    pub fn kernel(&self) -> DMatrix<f64> {
        &self.phi_star * &self.w_star
    }

    /// Dual features `mu(s) = w_star[., s] / q(s)`, one row per state. States
    /// with `q(s) = 0` get zero rows.
    pub fn dual_features(&self, q: &[f64]) -> DMatrix<f64> {
        let d = self.rank();
        DMatrix::from_fn(q.len(), d, |s, k| {
            if q[s] > 0.0 {
                self.w_star[(k, s)] / q[s]
            } else {
                0.0
            }
        })
    }

    /// Policy-conditioned dual features
    /// `mu^pi(s, a) = pi(a|s) / pi_b(a|s) * mu(s)`, one row per pair.
    pub fn dual_features_pi(&self, q: &[f64], target: &Policy, behavior: &Policy) -> DMatrix<f64> {
        let mu = self.dual_features(q);
        let na = target.n_actions();
        DMatrix::from_fn(q.len() * na, self.rank(), |i, k| {
            let (s, a) = (i / na, i % na);
            let pb = behavior.prob(s, a);
            if pb > 0.0 {
                target.prob(s, a) / pb * mu[(s, k)]
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankOptions {
    pub n_states: usize,
    pub n_actions: usize,
    pub rank: usize,
    pub gamma: f64,
    /// Force `r(s, a) = <phi_star(s, a), theta_r>`.
    pub reward_linear: bool,
    /// Dirichlet concentration of the `w_star` rows.
    pub concentration: f64,
    pub seed: u64,
}

impl LowRankOptions {
    pub fn new(n_states: usize, n_actions: usize, rank: usize, seed: u64) -> Self {
        Self {
            n_states,
            n_actions,
            rank,
            gamma: 0.9,
            reward_linear: false,
            concentration: 1.0,
            seed,
        }
    }

    pub fn gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn reward_linear(mut self, on: bool) -> Self {
        self.reward_linear = on;
        self
    }
}

/// Random low-rank MDP with the default options (discount 0.9, tabular
/// uniform rewards).
pub fn random_lowrank_mdp(
    n_states: usize,
    n_actions: usize,
    d: usize,
    seed: u64,
) -> Result<(TabularMdp, LowRankGroundTruth)> {
    random_lowrank_mdp_with(&LowRankOptions::new(n_states, n_actions, d, seed))
}

/// Random low-rank MDP: `phi_star` rows and `w_star` rows are Dirichlet draws,
/// `mu0` is a Dirichlet mixture of the `w_star` rows so the initial
/// distribution lies in the span of the dual features.
pub fn random_lowrank_mdp_with(opts: &LowRankOptions) -> Result<(TabularMdp, LowRankGroundTruth)> {
    let LowRankOptions {
        n_states: ns,
        n_actions: na,
        rank: d,
        ..
    } = *opts;
    if ns == 0 || na == 0 {
        return Err(Error::InvalidArgument("empty state or action space".into()));
    }
    if d == 0 || d > ns.min(ns * na) {
        return Err(Error::InvalidArgument(format!(
            "rank {d} outside 1..={}",
            ns.min(ns * na)
        )));
    }
    if !(opts.concentration > 0.0) {
        return Err(Error::InvalidArgument("concentration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = ns * na;

    let mut phi_star = DMatrix::zeros(n, d);
    for i in 0..n {
        let row = dirichlet(&mut rng, d, 1.0);
        for k in 0..d {
            phi_star[(i, k)] = row[k];
        }
    }
    let mut w_star = DMatrix::zeros(d, ns);
    for k in 0..d {
        let row = dirichlet(&mut rng, ns, opts.concentration);
        for s in 0..ns {
            w_star[(k, s)] = row[s];
        }
    }
    let omega0 = dirichlet(&mut rng, d, 1.0);
    let mu0: Vec<f64> = (0..ns)
        .map(|s| (0..d).map(|k| omega0[k] * w_star[(k, s)]).sum())
        .collect();
    let mu0 = renormalize(mu0);

    let (reward, theta_r) = if opts.reward_linear {
        let theta: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let r = (0..n)
            .map(|i| {
                let v: f64 = (0..d).map(|k| phi_star[(i, k)] * theta[k]).sum();
                v.clamp(0.0, 1.0)
            })
            .collect();
        (r, Some(theta))
    } else {
        ((0..n).map(|_| rng.random::<f64>()).collect(), None)
    };

    let kernel = &phi_star * &w_star;
    let mut transition = Vec::with_capacity(n * ns);
    for i in 0..n {
        let row: Vec<f64> = (0..ns).map(|s| kernel[(i, s)]).collect();
        transition.extend(renormalize(row));
    }
    let mdp = TabularMdp::new(ns, na, transition, reward, mu0, opts.gamma)?;
    Ok((
        mdp,
        LowRankGroundTruth {
            phi_star,
            w_star,
            omega0,
            theta_r,
        },
    ))
}

/// `pi(a|s) = (1 - eps) 1[a optimal] + eps / |A|` around the optimal policy.
pub fn epsilon_greedy_optimal(mdp: &TabularMdp, epsilon: f64) -> Result<Policy> {
    let greedy = greedy_optimal_actions(mdp, 1e-10);
    Policy::epsilon_greedy(mdp.n_actions(), &greedy, epsilon)
}

fn dirichlet<R: Rng>(rng: &mut R, k: usize, alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = if alpha == 1.0 {
        (0..k).map(|_| Exp1.sample(rng)).collect()
    } else {
        let gamma = rand_distr::Gamma::new(alpha, 1.0).expect("positive shape");
        (0..k).map(|_| gamma.sample(rng)).collect()
    };
    renormalize(raw)
}

/// Rescales to unit sum; folds the rounding residue into the largest entry so
/// the sum is exact to the last bit where possible.
fn renormalize(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    let residue = 1.0 - v.iter().sum::<f64>();
    if let Some(max) = v.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *max += residue;
    }
    v
}
