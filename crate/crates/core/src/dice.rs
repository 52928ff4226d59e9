//! Distribution-correction estimation in a learned feature space.
//!
//! With primal features `phi` and dual features `mu_pi`, the saddle objective
//!
//! ```text
//! L(theta, omega) = (1 - gamma) E_{s~mu0, a~pi}[phi^T theta]
//!                 + E_D[(mu_pi^T omega) (r + gamma phi(s',a')^T theta - phi(s,a)^T theta)]
//!                 - lambda E_D[f(mu_pi^T omega)]
//! ```
//!
//! is affine in `theta` and concave in `omega`. Its saddle point gives the
//! correction ratio `zeta = mu_pi^T omega`, and the value estimate is
//! `E_D[zeta * r]`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{
    chain_value, initial_pair_distribution, occupancy_measure, policy_value_exact,
    state_action_kernel, Policy, TabularMdp, TransitionDataset,
};
use crate::replearn::{reconstruct_kernel, SpectralRep};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerKind {
    None,
    /// `f(x) = (x - 1)^2 / 2`, zero at the on-policy ratio.
    HalfSquare,
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegularizerKind::None => "none",
            RegularizerKind::HalfSquare => "half_square",
        })
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(RegularizerKind::None),
            "half_square" => Ok(RegularizerKind::HalfSquare),
            other => Err(Error::InvalidArgument(format!("unknown regularizer '{other}'"))),
        }
    }
}

/// `lambda * f` appended (with a minus sign) to the saddle objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularizer {
    kind: RegularizerKind,
    lambda: f64,
}

impl Regularizer {
    pub fn new(kind: RegularizerKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "regularization weight must be >= 0, got {lambda}"
            )));
        }
        if kind == RegularizerKind::None && lambda != 0.0 {
            return Err(Error::InvalidArgument(
                "an absent regularizer must have weight 0".into(),
            ));
        }
        Ok(Self { kind, lambda })
    }

    pub fn none() -> Self {
        Self {
            kind: RegularizerKind::None,
            lambda: 0.0,
        }
    }

    pub fn half_square(lambda: f64) -> Result<Self> {
        Self::new(RegularizerKind::HalfSquare, lambda)
    }

    pub fn kind(&self) -> RegularizerKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `f(x)`.
    pub fn f(&self, x: f64) -> f64 {
        match self.kind {
            RegularizerKind::None => 0.0,
            RegularizerKind::HalfSquare => 0.5 * (x - 1.0) * (x - 1.0),
        }
    }

    /// `f'(x)`.
    pub fn df(&self, x: f64) -> f64 {
        match self.kind {
            RegularizerKind::None => 0.0,
            RegularizerKind::HalfSquare => x - 1.0,
        }
    }

    /// Fenchel conjugate `f*(y) = sup_x (x y - f(x))`. For the half square
    /// this is `y + y^2 / 2`; the absent regularizer is the zero function,
    /// whose conjugate is the indicator of `{0}`.
    pub fn conjugate(&self, y: f64) -> f64 {
        match self.kind {
            RegularizerKind::None => {
                if y == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            RegularizerKind::HalfSquare => y + 0.5 * y * y,
        }
    }

    /// The maximizer `x` in `f*(y) = sup_x (x y - f(x))`.
    pub fn conjugate_argmax(&self, y: f64) -> Option<f64> {
        match self.kind {
            RegularizerKind::None => None,
            RegularizerKind::HalfSquare => Some(1.0 + y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub steps: usize,
    /// Primal and dual step sizes, in units of the inverse spectral norm of
    /// the empirical coupling matrix (in the solver's coordinates).
    pub step_q: f64,
    pub step_w: f64,
    pub batch_size: usize,
    /// Upper bound on the correction ratio inside the dual box.
    pub c_inf_bound: f64,
    pub seed: u64,
    /// Slack added on both sides of the `[0, 1/(1-gamma)]` range allowed for
    /// `phi^T theta`, as a fraction of `1/(1-gamma)`. With no slack the box is
    /// active at any pair whose true Q value sits on the range's edge, and the
    /// dual weights are then pinned only by the regularizer.
    pub q_margin: f64,
    /// Cyclic half-space clipping passes per projection.
    pub projection_passes: usize,
    /// Solve in coordinates where the empirical feature second moments and
    /// the empirical coupling are (approximately) the identity.
    pub precondition: bool,
    /// Record a duality-gap estimate every this many steps (0 disables).
    pub gap_every: usize,
    /// Inner-optimization iterations used by each gap estimate.
    pub gap_probes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            step_q: 0.2,
            step_w: 0.2,
            batch_size: 1024,
            c_inf_bound: 20.0,
            seed: 0,
            q_margin: 0.5,
            projection_passes: 5,
            precondition: true,
            gap_every: 100,
            gap_probes: 20,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step_q > 0.0 && self.step_w > 0.0) {
            return Err(Error::InvalidArgument("step sizes must be positive".into()));
        }
        if !(self.c_inf_bound >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "concentratability bound must be >= 1, got {}",
                self.c_inf_bound
            )));
        }
        if !(self.q_margin >= 0.0 && self.q_margin.is_finite()) {
            return Err(Error::InvalidArgument("Q-box margin must be >= 0".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "steps and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceSolution {
    pub theta_q: Vec<f64>,
    pub omega_d: Vec<f64>,
    pub rho_hat: f64,
    /// `(iteration, gap estimate)` checkpoints.
    pub gap_trace: Vec<(usize, f64)>,
    pub iterations: usize,
    pub final_gap: f64,
    /// Largest box violation left after the approximate projections.
    pub max_box_violation: f64,
}

/// Everything the estimator needs besides the representation.
#[derive(Debug, Clone, Copy)]
pub struct DiceInputs<'a> {
    pub dataset: &'a TransitionDataset,
    pub target: &'a Policy,
    pub mu0: &'a [f64],
    /// Reward table flattened over state-action pairs.
    pub rewards: &'a [f64],
}

impl DiceInputs<'_> {
    fn gamma(&self) -> f64 {
        self.dataset.gamma_used
    }

    fn check(&self, rep: &SpectralRep) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let (ns, na) = (self.target.n_states(), self.target.n_actions());
        if rep.n_states != ns || rep.n_actions != na {
            return Err(Error::InvalidArgument(
                "representation and policy shapes differ".into(),
            ));
        }
        if self.mu0.len() != ns || self.rewards.len() != ns * na {
            return Err(Error::InvalidArgument(
                "mu0 or reward table has the wrong length".into(),
            ));
        }
        if !(self.gamma() > 0.0 && self.gamma() < 1.0) {
            return Err(Error::InvalidArgument("dataset discount outside (0, 1)".into()));
        }
        self.dataset.validate(ns, na)
    }
}

/// Sufficient statistics of the saddle objective for the half-square (or
/// absent) regularizer:
///
/// ```text
/// L = (1-gamma) init^T theta + omega^T (reward - coupling theta)
///     - lambda (omega^T second omega / 2 - first^T omega + 1/2)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleObjective {
    pub gamma: f64,
    pub reg: Regularizer,
    /// `E_{mu0, pi}[phi]`.
    pub init: DVector<f64>,
    /// `E[mu_pi (phi - gamma phi')^T]`.
    pub coupling: DMatrix<f64>,
    /// `E[mu_pi r]`.
    pub reward: DVector<f64>,
    /// `E[mu_pi mu_pi^T]`.
    pub second: DMatrix<f64>,
    /// `E[mu_pi]`.
    pub first: DVector<f64>,
}

impl SaddleObjective {
    /// Empirical objective over a dataset. The next action is integrated out
    /// exactly under the target policy.
    pub fn empirical(rep: &SpectralRep, inputs: &DiceInputs<'_>, reg: Regularizer) -> Result<Self> {
        inputs.check(rep)?;
        let d = rep.d();
        let na = rep.n_actions;
        let gamma = inputs.gamma();
        let next_phi = expected_next_features(rep, inputs.target);
        let mut weights = vec![0.0; rep.n_pairs()];
        let mut coupling = DMatrix::zeros(d, d);
        let w = 1.0 / inputs.dataset.len() as f64;
        // Group by (pair, next state) to keep the cost O(distinct * d^2).
        let mut next_mass = vec![0.0; rep.n_pairs() * rep.n_states];
        for t in &inputs.dataset.transitions {
            let x = t.s * na + t.a;
            weights[x] += w;
            next_mass[x * rep.n_states + t.s_next] += w;
        }
        for x in 0..rep.n_pairs() {
            if weights[x] == 0.0 {
                continue;
            }
            let mut td = rep.phi.row(x).transpose() * weights[x];
            for s2 in 0..rep.n_states {
                let m = next_mass[x * rep.n_states + s2];
                if m > 0.0 {
                    td -= next_phi.row(s2).transpose() * (gamma * m);
                }
            }
            coupling.ger(1.0, &rep.mu_pi.row(x).transpose(), &td, 1.0);
        }
        let (reward, second, first) = dual_moments(rep, &weights, inputs.rewards);
        Ok(Self {
            gamma,
            reg,
            init: initial_features(rep, inputs.mu0, inputs.target),
            coupling,
            reward,
            second,
            first,
        })
    }

    /// Population objective: expectations under the behavior occupancy and
    /// the true kernel.
    pub fn exact(
        rep: &SpectralRep,
        mdp: &TabularMdp,
        target: &Policy,
        behavior: &Policy,
        reg: Regularizer,
    ) -> Result<Self> {
        if rep.n_pairs() != mdp.n_pairs() {
            return Err(Error::InvalidArgument(
                "representation and MDP sizes differ".into(),
            ));
        }
        let d_b = occupancy_measure(mdp, behavior)?.values;
        let kernel = state_action_kernel(mdp, target)?;
        let gamma = mdp.gamma();
        let next = &kernel * &rep.phi;
        let d = rep.d();
        let mut coupling = DMatrix::zeros(d, d);
        for (x, &w) in d_b.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let td = (rep.phi.row(x) - next.row(x) * gamma).transpose() * w;
            coupling.ger(1.0, &rep.mu_pi.row(x).transpose(), &td, 1.0);
        }
        let (reward, second, first) = dual_moments(rep, &d_b, mdp.rewards());
        Ok(Self {
            gamma,
            reg,
            init: initial_features(rep, mdp.mu0(), target),
            coupling,
            reward,
            second,
            first,
        })
    }

    pub fn dim(&self) -> usize {
        self.init.len()
    }

    fn reg_term(&self, omega: &DVector<f64>) -> f64 {
        match self.reg.kind() {
            RegularizerKind::None => 0.0,
            RegularizerKind::HalfSquare => {
                0.5 * omega.dot(&(&self.second * omega)) - self.first.dot(omega) + 0.5
            }
        }
    }

    pub fn value(&self, theta: &DVector<f64>, omega: &DVector<f64>) -> f64 {
        (1.0 - self.gamma) * self.init.dot(theta)
            + omega.dot(&(&self.reward - &self.coupling * theta))
            - self.reg.lambda() * self.reg_term(omega)
    }

    /// `dL/dtheta`; independent of `theta`.
    pub fn grad_theta(&self, omega: &DVector<f64>) -> DVector<f64> {
        &self.init * (1.0 - self.gamma) - self.coupling.tr_mul(omega)
    }

    /// `dL/domega`.
    pub fn grad_omega(&self, theta: &DVector<f64>, omega: &DVector<f64>) -> DVector<f64> {
        let mut g = &self.reward - &self.coupling * theta;
        if self.reg.kind() == RegularizerKind::HalfSquare {
            g -= (&self.second * omega - &self.first) * self.reg.lambda();
        }
        g
    }

    /// Unconstrained maximizer over `omega` for fixed `theta`; requires a
    /// strictly concave inner problem.
    pub fn best_omega(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        let lambda = self.reg.lambda();
        if self.reg.kind() != RegularizerKind::HalfSquare || lambda <= 0.0 {
            return None;
        }
        let rhs = &self.first + (&self.reward - &self.coupling * theta) / lambda;
        self.second.clone().cholesky().map(|c| c.solve(&rhs))
    }

    /// Saddle point without box constraints. The inner maximization is solved
    /// in closed form, leaving a convex quadratic in `theta` whose normal
    /// equations are solved densely.
    pub fn unconstrained_saddle(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        if self.reg.kind() != RegularizerKind::HalfSquare || self.reg.lambda() <= 0.0 {
            return Err(Error::InvalidArgument(
                "the closed-form solve needs a half-square regularizer with lambda > 0".into(),
            ));
        }
        let d = self.dim();
        let lambda = self.reg.lambda();
        let second_inv = self.second.clone().cholesky().ok_or_else(|| Error::RankDeficient {
            dim: d,
            null_dim: null_dimension(&self.second),
        })?;
        // theta minimizes (1-g) init^T theta + |reward + lambda first - coupling theta|^2_{second^-1} / (2 lambda)
        let m_inv_a = second_inv.solve(&self.coupling);
        let normal = self.coupling.tr_mul(&m_inv_a);
        let nd = null_dimension(&normal);
        if nd > 0 {
            return Err(Error::RankDeficient { dim: d, null_dim: nd });
        }
        let shifted = &self.reward + &self.first * lambda;
        let rhs = m_inv_a.tr_mul(&shifted) - &self.init * (lambda * (1.0 - self.gamma));
        let theta = normal
            .lu()
            .solve(&rhs)
            .ok_or(Error::RankDeficient { dim: d, null_dim: 1 })?;
        let omega = self
            .best_omega(&theta)
            .ok_or_else(|| Error::Singular("dual second moment".into()))?;
        Ok((theta, omega))
    }
}

fn initial_features(rep: &SpectralRep, mu0: &[f64], target: &Policy) -> DVector<f64> {
    let nu0 = initial_pair_distribution(mu0, target);
    rep.phi.tr_mul(&DVector::from_column_slice(&nu0))
}

/// `E_{a'~pi(.|s')}[phi(s', a')]`, one row per state.
fn expected_next_features(rep: &SpectralRep, target: &Policy) -> DMatrix<f64> {
    let na = rep.n_actions;
    DMatrix::from_fn(rep.n_states, rep.d(), |s, k| {
        (0..na).map(|a| target.prob(s, a) * rep.phi[(s * na + a, k)]).sum()
    })
}

fn dual_moments(
    rep: &SpectralRep,
    weights: &[f64],
    rewards: &[f64],
) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let d = rep.d();
    let mut reward = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    let mut first = DVector::zeros(d);
    for (x, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let m = rep.mu_pi.row(x).transpose();
        reward.axpy(w * rewards[x], &m, 1.0);
        first.axpy(w, &m, 1.0);
        second.ger(w, &m, &m, 1.0);
    }
    (reward, second, first)
}

/// Polyhedral box `{x : lower <= g_i^T x <= upper}` projected onto by cyclic
/// half-space clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBox {
    /// One constraint normal per column.
    normals: DMatrix<f64>,
    norms_sq: Vec<f64>,
    lower: f64,
    upper: f64,
    passes: usize,
}

impl FeatureBox {
    /// Constrains `features.row(i)^T x` for every `i` in `rows`.
    pub fn new(features: &DMatrix<f64>, rows: &[usize], lower: f64, upper: f64, passes: usize) -> Self {
        let normals = DMatrix::from_fn(features.ncols(), rows.len(), |k, i| features[(rows[i], k)]);
        let norms_sq = normals.column_iter().map(|c| c.norm_squared()).collect();
        Self {
            normals,
            norms_sq,
            lower,
            upper,
            passes,
        }
    }

    /// Clips `x` in place; returns the number of half-space corrections made.
    pub fn project(&self, x: &mut DVector<f64>) -> usize {
        let mut corrections = 0;
        for _ in 0..self.passes {
            let mut changed = false;
            for (i, &nsq) in self.norms_sq.iter().enumerate() {
                if nsq <= 0.0 {
                    continue;
                }
                let g = self.normals.column(i);
                let v = g.dot(x);
                let shift = if v > self.upper {
                    self.upper - v
                } else if v < self.lower {
                    self.lower - v
                } else {
                    continue;
                };
                x.axpy(shift / nsq, &g, 1.0);
                corrections += 1;
                changed = true;
            }
            if !changed {
                break;
            }
        }
        corrections
    }

    /// Largest amount by which `x` violates any constraint.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let v = self.normals.tr_mul(x);
        v.iter()
            .map(|&v| (v - self.upper).max(self.lower - v).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Feasible regions for the primal and dual weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleBoxes {
    pub theta: FeatureBox,
    pub omega: FeatureBox,
}

impl SaddleBoxes {
    /// `0 <= phi^T theta <= 1/(1-gamma)` on every pair the estimator touches
    /// (dataset pairs, target-policy successors, initial pairs) and
    /// `0 <= mu_pi^T omega <= c_inf` on the dataset pairs.
    pub fn for_dataset(rep: &SpectralRep, inputs: &DiceInputs<'_>, cfg: &SolverConfig) -> Self {
        let na = rep.n_actions;
        let mut data_pairs = vec![false; rep.n_pairs()];
        let mut q_pairs = vec![false; rep.n_pairs()];
        for t in &inputs.dataset.transitions {
            data_pairs[t.s * na + t.a] = true;
            q_pairs[t.s * na + t.a] = true;
            for a2 in 0..na {
                if inputs.target.prob(t.s_next, a2) > 0.0 {
                    q_pairs[t.s_next * na + a2] = true;
                }
            }
        }
        for (x, &p) in initial_pair_distribution(inputs.mu0, inputs.target).iter().enumerate() {
            if p > 0.0 {
                q_pairs[x] = true;
            }
        }
        Self::from_masks(rep, &q_pairs, &data_pairs, inputs.gamma(), cfg)
    }

    fn from_masks(
        rep: &SpectralRep,
        q_pairs: &[bool],
        zeta_pairs: &[bool],
        gamma: f64,
        cfg: &SolverConfig,
    ) -> Self {
        let q_max = 1.0 / (1.0 - gamma);
        let select = |mask: &[bool]| -> Vec<usize> {
            mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
        };
        Self {
            theta: FeatureBox::new(
                &rep.phi,
                &select(q_pairs),
                -cfg.q_margin * q_max,
                (1.0 + cfg.q_margin) * q_max,
                cfg.projection_passes,
            ),
            omega: FeatureBox::new(
                &rep.mu_pi,
                &select(zeta_pairs),
                0.0,
                cfg.c_inf_bound,
                cfg.projection_passes,
            ),
        }
    }
}

/// Estimates `max_omega L(theta, .) - min_theta L(., omega)` over the boxes.
///
/// The dual side starts from the closed-form unconstrained maximizer (when
/// the regularizer makes it strictly concave) and the current point; the
/// primal side from the current point. Each side then runs `probes` projected
/// gradient steps and keeps the best value seen, so the estimate is never
/// negative and never exceeds the true gap by more than the projection error.
pub fn duality_gap(
    obj: &SaddleObjective,
    boxes: &SaddleBoxes,
    theta: &DVector<f64>,
    omega: &DVector<f64>,
    probes: usize,
) -> f64 {
    let here = obj.value(theta, omega);

    let mut upper = here;
    let dual_curv = obj.reg.lambda() * obj.second.norm().max(1e-12);
    let dual_step = if obj.reg.lambda() > 0.0 { 1.0 / dual_curv } else { 1.0 };
    let mut starts = vec![omega.clone()];
    if let Some(mut w) = obj.best_omega(theta) {
        boxes.omega.project(&mut w);
        starts.push(w);
    }
    for start in starts {
        let mut w = start;
        upper = upper.max(obj.value(theta, &w));
        for _ in 0..probes {
            let g = obj.grad_omega(theta, &w);
            w.axpy(dual_step, &g, 1.0);
            boxes.omega.project(&mut w);
            upper = upper.max(obj.value(theta, &w));
        }
    }

    let mut lower = here;
    let g = obj.grad_theta(omega);
    let mut t = theta.clone();
    for _ in 0..probes {
        t.axpy(-1.0, &g, 1.0);
        boxes.theta.project(&mut t);
        lower = lower.min(obj.value(&t, omega));
    }
    (upper - lower).max(0.0)
}

/// Linear change of coordinates for the solver. The features are first
/// whitened so their empirical second moments are the identity (on their
/// numerical range); the whitened coupling `U S V^T` is then balanced by
/// `theta -> V S^{-1/2}`, `omega -> U S^{-1/2}` so that every singular
/// direction of the bilinear part rotates at the same rate.
#[derive(Debug, Clone)]
struct Preconditioner {
    phi: DMatrix<f64>,
    mu: DMatrix<f64>,
}

impl Preconditioner {
    /// Singular values of the whitened coupling below this fraction of the
    /// largest are treated as equal to it.
    const COUPLING_FLOOR: f64 = 1e-3;

    fn identity(d: usize) -> Self {
        Self {
            phi: DMatrix::identity(d, d),
            mu: DMatrix::identity(d, d),
        }
    }

    fn fit(rep: &SpectralRep, inputs: &DiceInputs<'_>, reg: Regularizer) -> Result<Self> {
        let weights = inputs.dataset.pair_frequencies(rep.n_states, rep.n_actions);
        let whitened = Self {
            phi: inverse_sqrt_second_moment(&rep.phi, &weights),
            mu: inverse_sqrt_second_moment(&rep.mu_pi, &weights),
        };
        let coupling = SaddleObjective::empirical(&whitened.apply(rep), inputs, reg)?.coupling;
        let svd = coupling.svd(true, true);
        let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
        if !(top > 0.0) {
            return Ok(whitened);
        }
        let scale = DMatrix::from_diagonal(
            &svd.singular_values
                .map(|sv| 1.0 / sv.max(Self::COUPLING_FLOOR * top).sqrt()),
        );
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::Singular("coupling decomposition failed".into())),
        };
        Ok(Self {
            phi: &whitened.phi * v_t.transpose() * &scale,
            mu: &whitened.mu * u * scale,
        })
    }

    fn apply(&self, rep: &SpectralRep) -> SpectralRep {
        SpectralRep {
            phi: &rep.phi * &self.phi,
            mu_pi: &rep.mu_pi * &self.mu,
            ..rep.clone()
        }
    }
}

fn inverse_sqrt_second_moment(features: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let d = features.ncols();
    let mut m = DMatrix::zeros(d, d);
    for (x, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            let row = features.row(x).transpose();
            m.ger(w, &row, &row, 1.0);
        }
    }
    let eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let floor = (top * 1e-8).max(1e-300);
    let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt()));
    &eig.eigenvectors * scale * eig.eigenvectors.transpose()
}

struct PreparedSample {
    anchor: usize,
    reward: f64,
}

/// Shuffled passes over the dataset with the next action redrawn from the
/// target policy at the start of every pass.
struct EpochSampler<'a> {
    inputs: &'a DiceInputs<'a>,
    n_actions: usize,
    batch: usize,
    order: Vec<usize>,
    next_pairs: Vec<usize>,
    cursor: usize,
}

impl<'a> EpochSampler<'a> {
    fn new(inputs: &'a DiceInputs<'a>, n_actions: usize, batch: usize) -> Self {
        let n = inputs.dataset.len();
        Self {
            inputs,
            n_actions,
            batch: batch.min(n),
            order: (0..n).collect(),
            next_pairs: vec![0; n],
            cursor: n,
        }
    }

    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> std::ops::Range<usize> {
        let n = self.order.len();
        if self.cursor + self.batch > n {
            self.order.shuffle(rng);
            for (i, t) in self.inputs.dataset.transitions.iter().enumerate() {
                self.next_pairs[i] = t.s_next * self.n_actions + self.inputs.target.sample(t.s_next, rng);
            }
            self.cursor = 0;
        }
        let range = self.cursor..self.cursor + self.batch;
        self.cursor += self.batch;
        range
    }
}

/// Projected stochastic extragradient descent-ascent on the empirical
/// objective, returning the average of the last half of the iterates.
pub fn spectral_dice(
    rep: &SpectralRep,
    inputs: &DiceInputs<'_>,
    reg: Regularizer,
    cfg: &SolverConfig,
) -> Result<DiceSolution> {
    inputs.check(rep)?;
    cfg.validate()?;
    let d = rep.d();
    let na = rep.n_actions;
    let gamma = inputs.gamma();
    let lambda = reg.lambda();

    let precond = if cfg.precondition {
        Preconditioner::fit(rep, inputs, reg)?
    } else {
        Preconditioner::identity(d)
    };
    let work = precond.apply(rep);
    let boxes = SaddleBoxes::for_dataset(&work, inputs, cfg);
    let objective = SaddleObjective::empirical(&work, inputs, reg)?;
    let init_term = &objective.init * (1.0 - gamma);
    let coupling_norm = objective
        .coupling
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
        .max(1e-12);
    let step_q = cfg.step_q / coupling_norm;
    let step_w = cfg.step_w / coupling_norm;

    let samples: Vec<PreparedSample> = inputs
        .dataset
        .transitions
        .iter()
        .map(|t| PreparedSample {
            anchor: t.s * na + t.a,
            reward: inputs.rewards[t.s * na + t.a],
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = EpochSampler::new(inputs, na, cfg.batch_size);

    // zeta = 1 as closely as the dual features allow
    let mut omega = objective
        .second
        .clone()
        .cholesky()
        .map(|c| c.solve(&objective.first))
        .unwrap_or_else(|| DVector::zeros(d));
    boxes.omega.project(&mut omega);
    let mut theta = DVector::zeros(d);

    let avg_from = cfg.steps / 2;
    let mut theta_sum = DVector::zeros(d);
    let mut omega_sum = DVector::zeros(d);
    let mut gap_trace = Vec::new();

    // Per-sample terms only need the scalars Q(x) and zeta(x); the gradients
    // are then feature-weighted sums of per-pair coefficients.
    let n_pairs = rep.n_pairs();
    let batch_grad = |idx: &[usize], next: &[usize], theta: &DVector<f64>, omega: &DVector<f64>| {
        let q = &work.phi * theta;
        let zeta = &work.mu_pi * omega;
        let mut c_phi = DVector::zeros(n_pairs);
        let mut c_mu = DVector::zeros(n_pairs);
        let w = 1.0 / idx.len() as f64;
        for &i in idx {
            let x = samples[i].anchor;
            let y = next[i];
            let z = zeta[x];
            let td = samples[i].reward + gamma * q[y] - q[x];
            c_phi[y] += w * gamma * z;
            c_phi[x] -= w * z;
            c_mu[x] += w * (td - lambda * reg.df(z));
        }
        let g_theta = work.phi.tr_mul(&c_phi) + &init_term;
        let g_omega = work.mu_pi.tr_mul(&c_mu);
        (g_theta, g_omega)
    };

    for step in 0..cfg.steps {
        // The extrapolation and the update use independent batches; reusing
        // one batch biases the fixed point through products of noisy
        // coupling estimates.
        let idx = sampler.next_batch(&mut rng);
        let (gt, gw) = batch_grad(&sampler.order[idx], &sampler.next_pairs, &theta, &omega);
        let mut theta_half = &theta - &gt * step_q;
        let mut omega_half = &omega + &gw * step_w;
        boxes.theta.project(&mut theta_half);
        boxes.omega.project(&mut omega_half);

        let idx = sampler.next_batch(&mut rng);
        let (gt, gw) = batch_grad(&sampler.order[idx], &sampler.next_pairs, &theta_half, &omega_half);
        theta.axpy(-step_q, &gt, 1.0);
        omega.axpy(step_w, &gw, 1.0);
        boxes.theta.project(&mut theta);
        boxes.omega.project(&mut omega);

        if theta.iter().chain(omega.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "saddle iterates became non-finite at step {step}"
            )));
        }
        if step >= avg_from {
            theta_sum += &theta;
            omega_sum += &omega;
        }
        if cfg.gap_every > 0 && step % cfg.gap_every == 0 {
            let gap = duality_gap(&objective, &boxes, &theta, &omega, cfg.gap_probes);
            if !gap.is_finite() {
                return Err(Error::Divergence(format!("duality gap non-finite at step {step}")));
            }
            gap_trace.push((step, gap));
        }
    }

    let count = (cfg.steps - avg_from) as f64;
    let theta_avg = theta_sum / count;
    let omega_avg = omega_sum / count;
    let final_gap = duality_gap(&objective, &boxes, &theta_avg, &omega_avg, cfg.gap_probes);
    let max_box_violation = boxes
        .theta
        .violation(&theta_avg)
        .max(boxes.omega.violation(&omega_avg));

    let theta_q = &precond.phi * &theta_avg;
    let omega_d = &precond.mu * &omega_avg;
    let rho_hat = value_from_zeta(rep, omega_d.as_slice(), inputs.dataset, inputs.rewards)?;
    if !rho_hat.is_finite() || !final_gap.is_finite() {
        return Err(Error::Divergence("non-finite estimate".into()));
    }
    if !(-0.5..=1.5).contains(&rho_hat) {
        return Err(Error::EstimateOutOfRange(rho_hat));
    }
    Ok(DiceSolution {
        theta_q: theta_q.as_slice().to_vec(),
        omega_d: omega_d.as_slice().to_vec(),
        rho_hat,
        gap_trace,
        iterations: cfg.steps,
        final_gap,
        max_box_violation,
    })
}

/// Exact saddle point of the regularized objective with population
/// expectations.
pub fn exact_regularized_solve(
    rep: &SpectralRep,
    mdp: &TabularMdp,
    target: &Policy,
    behavior: &Policy,
    reg: Regularizer,
) -> Result<DiceSolution> {
    let obj = SaddleObjective::exact(rep, mdp, target, behavior, reg)?;
    let (theta, omega) = obj.unconstrained_saddle()?;

    let d_b = occupancy_measure(mdp, behavior)?.values;
    let rho_hat = value_from_zeta_weighted(rep, omega.as_slice(), &d_b, mdp.rewards())?;
    let gap = {
        let support: Vec<bool> = d_b.iter().map(|&w| w > 0.0).collect();
        let boxes = SaddleBoxes::from_masks(
            rep,
            &support,
            &support,
            mdp.gamma(),
            &SolverConfig {
                c_inf_bound: f64::INFINITY,
                ..SolverConfig::default()
            },
        );
        duality_gap(&obj, &boxes, &theta, &omega, 0)
    };
    Ok(DiceSolution {
        theta_q: theta.as_slice().to_vec(),
        omega_d: omega.as_slice().to_vec(),
        rho_hat,
        gap_trace: vec![(0, gap)],
        iterations: 1,
        final_gap: gap,
        max_box_violation: 0.0,
    })
}

fn null_dimension(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return m.ncols();
    }
    sv.iter().filter(|&&s| s <= 1e-12 * top).count()
}

/// Correction ratio `zeta(s, a) = mu_pi(s, a)^T omega` for every pair.
pub fn zeta_table(rep: &SpectralRep, omega_d: &[f64]) -> Result<Vec<f64>> {
    if omega_d.len() != rep.d() {
        return Err(Error::InvalidArgument(format!(
            "omega has length {}, representation dimension is {}",
            omega_d.len(),
            rep.d()
        )));
    }
    let z = &rep.mu_pi * DVector::from_column_slice(omega_d);
    Ok(z.as_slice().to_vec())
}

/// `mean_{(s,a,s') in D} zeta(s, a) r(s, a)`.
pub fn value_from_zeta(
    rep: &SpectralRep,
    omega_d: &[f64],
    dataset: &TransitionDataset,
    rewards: &[f64],
) -> Result<f64> {
    let weights = dataset.pair_frequencies(rep.n_states, rep.n_actions);
    value_from_zeta_weighted(rep, omega_d, &weights, rewards)
}

/// `sum_x weights(x) zeta(x) r(x)`; with `weights = d^{pi_b}` this is the
/// population version of [`value_from_zeta`].
pub fn value_from_zeta_weighted(
    rep: &SpectralRep,
    omega_d: &[f64],
    weights: &[f64],
    rewards: &[f64],
) -> Result<f64> {
    let zeta = zeta_table(rep, omega_d)?;
    if weights.len() != zeta.len() || rewards.len() != zeta.len() {
        return Err(Error::InvalidArgument("weight or reward table size mismatch".into()));
    }
    Ok(zeta
        .iter()
        .zip(weights)
        .zip(rewards)
        .map(|((z, w), r)| z * w * r)
        .sum())
}

/// Both sides of the simulation identity for the model built from a
/// representation's reconstructed kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationCheck {
    /// Unnormalized value gap `(rho_model - rho_true) / (1 - gamma)`.
    pub lhs: f64,
    /// `gamma/(1-gamma) E_{d^pi}[E_model[Q_model] - E_true[Q_model]]`.
    pub rhs: f64,
    /// Largest negative mass removed from a single reconstructed row.
    pub clipped_mass: f64,
    /// Largest deviation of a reconstructed row sum from 1 before
    /// renormalization.
    pub row_mass_error: f64,
}

impl SimulationCheck {
    pub fn clipped(&self) -> bool {
        self.clipped_mass > 0.0
    }
}

/// Builds the model chain from `reconstruct_kernel(rep)` (negatives clipped,
/// rows renormalized) and evaluates both sides of the simulation identity
/// with dense solves.
pub fn simulation_lemma_check(
    mdp: &TabularMdp,
    rep: &SpectralRep,
    target: &Policy,
) -> Result<SimulationCheck> {
    let truth = state_action_kernel(mdp, target)?;
    let mut model = reconstruct_kernel(rep);
    let na = mdp.n_actions();
    let mut clipped_mass = 0.0f64;
    let mut row_mass_error = 0.0f64;
    for i in 0..model.nrows() {
        let mut row = model.row_mut(i);
        row_mass_error = row_mass_error.max((row.sum() - 1.0).abs());
        let negative: f64 = row.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
        clipped_mass = clipped_mass.max(negative);
        row.apply(|v| *v = v.max(0.0));
        let mass = row.sum();
        if !(mass > 0.0) {
            return Err(Error::DegenerateRow {
                state: i / na,
                action: i % na,
                mass,
            });
        }
        row /= mass;
    }
    let gamma = mdp.gamma();
    let nu0 = initial_pair_distribution(mdp.mu0(), target);
    let (q_model, rho_model) = chain_value(&model, mdp.rewards(), &nu0, gamma)?;
    let rho_true = policy_value_exact(mdp, target)?;
    let d_pi = occupancy_measure(mdp, target)?.values;
    let q = DVector::from_column_slice(&q_model);
    let diff = (&model - &truth) * q;
    let rhs = gamma / (1.0 - gamma) * diff.iter().zip(&d_pi).map(|(v, d)| v * d).sum::<f64>();
    Ok(SimulationCheck {
        lhs: (rho_model - rho_true) / (1.0 - gamma),
        rhs,
        clipped_mass,
        row_mass_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{epsilon_greedy_optimal, random_lowrank_mdp, LowRankOptions};
    use crate::mdp::{concentratability, sample_dataset};
    use crate::replearn::{ground_truth_representation, svd_representation};
    use proptest::prelude::*;

    fn rank2(seed: u64) -> (TabularMdp, SpectralRep, Policy, Policy) {
        let (mdp, truth) = random_lowrank_mdp(8, 2, 2, seed).unwrap();
        let target = epsilon_greedy_optimal(&mdp, 0.3).unwrap();
        let behavior = Policy::uniform(8, 2);
        let rep = ground_truth_representation(&mdp, &truth, &target, &behavior).unwrap();
        (mdp, rep, target, behavior)
    }

    #[test]
    fn regularizer_arguments() {
        assert!(Regularizer::new(RegularizerKind::None, 0.1).is_err());
        assert!(Regularizer::half_square(-1.0).is_err());
        assert!(Regularizer::half_square(0.0).is_ok());
        assert_eq!(Regularizer::half_square(1.0).unwrap().f(1.0), 0.0);
    }

    #[test]
    fn half_square_conjugate_satisfies_fenchel_young() {
        let f = Regularizer::half_square(1.0).unwrap();
        for &x in &[-2.0, -0.5, 0.0, 0.7, 1.0, 3.0] {
            for &y in &[-1.5, -0.2, 0.0, 0.4, 2.0] {
                assert!(f.f(x) + f.conjugate(y) >= x * y - 1e-12);
            }
            // equality at y = f'(x)
            let y = f.df(x);
            assert!((f.f(x) + f.conjugate(y) - x * y).abs() < 1e-12);
            assert!((f.conjugate_argmax(y).unwrap() - x).abs() < 1e-12);
            // f is recovered as the conjugate of its conjugate (on a grid)
            let biconj = (-4000..=4000)
                .map(|k| k as f64 * 1e-3)
                .map(|y| x * y - f.conjugate(y))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((biconj - f.f(x)).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_solve_recovers_true_ratio() {
        for seed in 0..4 {
            let (mdp, rep, target, behavior) = rank2(seed);
            let sol =
                exact_regularized_solve(&rep, &mdp, &target, &behavior, Regularizer::half_square(1e-4).unwrap())
                    .unwrap();
            let zeta = zeta_table(&rep, &sol.omega_d).unwrap();
            let d_pi = occupancy_measure(&mdp, &target).unwrap().values;
            let d_b = occupancy_measure(&mdp, &behavior).unwrap().values;
            for x in 0..16 {
                assert!((zeta[x] - d_pi[x] / d_b[x]).abs() <= 1e-6);
            }
            let rho = policy_value_exact(&mdp, &target).unwrap();
            assert!((sol.rho_hat - rho).abs() <= 1e-4);
            assert!(sol.final_gap <= 1e-8, "gap {}", sol.final_gap);
        }
    }

    #[test]
    fn exact_solve_on_policy_ratio_is_one() {
        let (mdp, truth) = random_lowrank_mdp(8, 2, 2, 3).unwrap();
        let pi = epsilon_greedy_optimal(&mdp, 0.4).unwrap();
        let rep = ground_truth_representation(&mdp, &truth, &pi, &pi).unwrap();
        let sol =
            exact_regularized_solve(&rep, &mdp, &pi, &pi, Regularizer::half_square(1e-3).unwrap()).unwrap();
        for z in zeta_table(&rep, &sol.omega_d).unwrap() {
            assert!((z - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn exact_solve_rejects_zero_lambda_and_rank_deficiency() {
        let (mdp, rep, target, behavior) = rank2(1);
        assert!(matches!(
            exact_regularized_solve(&rep, &mdp, &target, &behavior, Regularizer::half_square(0.0).unwrap()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            exact_regularized_solve(&rep, &mdp, &target, &behavior, Regularizer::none()),
            Err(Error::InvalidArgument(_))
        ));
        // duplicate a primal column: the normal matrix loses a dimension
        let mut phi = DMatrix::zeros(16, 3);
        let mut mu = DMatrix::zeros(16, 3);
        for x in 0..16 {
            for k in 0..2 {
                phi[(x, k)] = rep.phi[(x, k)];
                mu[(x, k)] = rep.mu_pi[(x, k)];
            }
            phi[(x, 2)] = rep.phi[(x, 0)];
            mu[(x, 2)] = (x as f64).sin();
        }
        let bad = SpectralRep::new(8, 2, phi, mu, rep.q_pib.clone(), rep.method).unwrap();
        let err = exact_regularized_solve(&bad, &mdp, &target, &behavior, Regularizer::half_square(1e-3).unwrap());
        assert!(matches!(err, Err(Error::RankDeficient { null_dim: 1, .. })), "{err:?}");
    }

    #[test]
    fn zeta_profile_invariant_to_lambda() {
        let (mdp, rep, target, behavior) = rank2(7);
        let profiles: Vec<Vec<f64>> = [1e-4, 1e-3, 1e-2]
            .iter()
            .map(|&l| {
                let sol = exact_regularized_solve(&rep, &mdp, &target, &behavior, Regularizer::half_square(l).unwrap())
                    .unwrap();
                zeta_table(&rep, &sol.omega_d).unwrap()
            })
            .collect();
        for p in &profiles[1..] {
            for (a, b) in p.iter().zip(&profiles[0]) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn value_from_zeta_cases() {
        let (mdp, rep, target, behavior) = rank2(2);
        let data = sample_dataset(&mdp, &behavior, 100_000, 5).unwrap();
        assert_eq!(value_from_zeta(&rep, &[0.0, 0.0], &data, mdp.rewards()).unwrap(), 0.0);

        let sol =
            exact_regularized_solve(&rep, &mdp, &target, &behavior, Regularizer::half_square(1e-4).unwrap()).unwrap();
        let d_b = occupancy_measure(&mdp, &behavior).unwrap().values;
        let ones = vec![1.0; 16];
        let total = value_from_zeta_weighted(&rep, &sol.omega_d, &d_b, &ones).unwrap();
        assert!((total - 1.0).abs() < 1e-8);

        // Monte-Carlo check against the exact value
        let zeta = zeta_table(&rep, &sol.omega_d).unwrap();
        let vals: Vec<f64> = data
            .transitions
            .iter()
            .map(|t| zeta[t.s * 2 + t.a] * mdp.reward(t.s, t.a))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let est = value_from_zeta(&rep, &sol.omega_d, &data, mdp.rewards()).unwrap();
        assert!((est - mean).abs() < 1e-12);
        let rho = policy_value_exact(&mdp, &target).unwrap();
        assert!((est - rho).abs() <= 3.0 * (var / n).sqrt());
        assert!(value_from_zeta(&rep, &[1.0], &data, mdp.rewards()).is_err());
    }

    fn empirical_setup(seed: u64, n: usize) -> (TabularMdp, SpectralRep, Policy, TransitionDataset) {
        let (mdp, rep, target, behavior) = rank2(seed);
        let data = sample_dataset(&mdp, &behavior, n, seed + 100).unwrap();
        (mdp, rep, target, data)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mdp, rep, target, data) = empirical_setup(4, 2000);
        let inputs = DiceInputs {
            dataset: &data,
            target: &target,
            mu0: mdp.mu0(),
            rewards: mdp.rewards(),
        };
        let obj = SaddleObjective::empirical(&rep, &inputs, Regularizer::half_square(0.1).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-5;
        for _ in 0..20 {
            let theta = DVector::from_fn(2, |_, _| rand::Rng::random_range(&mut rng, -3.0..3.0));
            let omega = DVector::from_fn(2, |_, _| rand::Rng::random_range(&mut rng, -3.0..3.0));
            let gt = obj.grad_theta(&omega);
            let gw = obj.grad_omega(&theta, &omega);
            for k in 0..2 {
                let mut e = DVector::zeros(2);
                e[k] = h;
                let fd_t = (obj.value(&(&theta + &e), &omega) - obj.value(&(&theta - &e), &omega)) / (2.0 * h);
                let fd_w = (obj.value(&theta, &(&omega + &e)) - obj.value(&theta, &(&omega - &e))) / (2.0 * h);
                assert!((fd_t - gt[k]).abs() <= 1e-6 * gt[k].abs().max(1.0));
                assert!((fd_w - gw[k]).abs() <= 1e-6 * gw[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn empirical_objective_matches_per_sample_average() {
        let (mdp, rep, target, data) = empirical_setup(5, 300);
        let reg = Regularizer::half_square(0.05).unwrap();
        let inputs = DiceInputs {
            dataset: &data,
            target: &target,
            mu0: mdp.mu0(),
            rewards: mdp.rewards(),
        };
        let obj = SaddleObjective::empirical(&rep, &inputs, reg).unwrap();
        let theta = DVector::from_vec(vec![1.3, -0.4]);
        let omega = DVector::from_vec(vec![0.2, 0.9]);
        let gamma = mdp.gamma();
        let mut direct = 0.0;
        for s in 0..8 {
            for a in 0..2 {
                direct += (1.0 - gamma) * mdp.mu0()[s] * target.prob(s, a)
                    * (rep.phi.row(s * 2 + a) * &theta)[0];
            }
        }
        let n = data.len() as f64;
        for t in &data.transitions {
            let x = t.s * 2 + t.a;
            let zeta = (rep.mu_pi.row(x) * &omega)[0];
            let next: f64 = (0..2)
                .map(|a2| target.prob(t.s_next, a2) * (rep.phi.row(t.s_next * 2 + a2) * &theta)[0])
                .sum();
            let td = mdp.rewards()[x] + gamma * next - (rep.phi.row(x) * &theta)[0];
            direct += (zeta * td - reg.lambda() * reg.f(zeta)) / n;
        }
        assert!((obj.value(&theta, &omega) - direct).abs() < 1e-10);
    }

    #[test]
    fn gap_vanishes_at_exact_saddle_and_is_positive_elsewhere() {
        let (mdp, rep, target, behavior) = rank2(6);
        let reg = Regularizer::half_square(1e-3).unwrap();
        let sol = exact_regularized_solve(&rep, &mdp, &target, &behavior, reg).unwrap();
        let obj = SaddleObjective::exact(&rep, &mdp, &target, &behavior, reg).unwrap();
        let d_b = occupancy_measure(&mdp, &behavior).unwrap().values;
        let support: Vec<bool> = d_b.iter().map(|&w| w > 0.0).collect();
        let boxes = SaddleBoxes::from_masks(
            &rep,
            &support,
            &support,
            mdp.gamma(),
            &SolverConfig {
                c_inf_bound: 100.0,
                ..SolverConfig::default()
            },
        );
        let theta = DVector::from_column_slice(&sol.theta_q);
        let omega = DVector::from_column_slice(&sol.omega_d);
        assert!(duality_gap(&obj, &boxes, &theta, &omega, 20) <= 1e-8);

        let ones = mdp.with_reward(vec![1.0; 16]).unwrap();
        let obj1 = SaddleObjective::exact(&rep, &ones, &target, &behavior, reg).unwrap();
        let zero = DVector::zeros(2);
        assert!(duality_gap(&obj1, &boxes, &zero, &zero, 20) > 0.0);
    }

    #[test]
    fn box_projection_is_idempotent_and_nonexpansive() {
        let features = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 2.0]);
        let b = FeatureBox::new(&features, &[0, 1, 2], 0.0, 1.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = DVector::from_fn(2, |_, _| rand::Rng::random_range(&mut rng, -3.0..3.0));
            let y = DVector::from_fn(2, |_, _| rand::Rng::random_range(&mut rng, -3.0..3.0));
            let mut px = x.clone();
            let mut py = y.clone();
            b.project(&mut px);
            b.project(&mut py);
            assert!(b.violation(&px) < 1e-12);
            let mut ppx = px.clone();
            assert_eq!(b.project(&mut ppx), 0);
            assert_eq!(ppx, px);
            assert!((&px - &py).norm() <= (&x - &y).norm() + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn projection_never_expands_distances(
            rows in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..6),
            x in (-5.0f64..5.0, -5.0f64..5.0),
            y in (-5.0f64..5.0, -5.0f64..5.0),
        ) {
            let flat: Vec<f64> = rows.iter().flat_map(|&(a, b)| [a, b]).collect();
            let features = DMatrix::from_row_slice(rows.len(), 2, &flat);
            let idx: Vec<usize> = (0..rows.len()).collect();
            let b = FeatureBox::new(&features, &idx, -1.0, 1.0, 5);
            let x = DVector::from_vec(vec![x.0, x.1]);
            let y = DVector::from_vec(vec![y.0, y.1]);
            let (mut px, mut py) = (x.clone(), y.clone());
            b.project(&mut px);
            b.project(&mut py);
            prop_assert!((&px - &py).norm() <= (&x - &y).norm() + 1e-9);
        }
    }

    fn solve_on(seed: u64, n: usize, target_eq_behavior: bool) -> (f64, f64, DiceSolution, SpectralRep) {
        let (mdp, truth) = random_lowrank_mdp(8, 2, 2, seed).unwrap();
        let behavior = Policy::uniform(8, 2);
        let target = if target_eq_behavior {
            behavior.clone()
        } else {
            epsilon_greedy_optimal(&mdp, 0.3).unwrap()
        };
        let rep = ground_truth_representation(&mdp, &truth, &target, &behavior).unwrap();
        let data = sample_dataset(&mdp, &behavior, n, seed + 17).unwrap();
        let c = concentratability(&mdp, &target, &behavior).unwrap();
        let cfg = SolverConfig {
            c_inf_bound: 2.0 * c,
            seed,
            ..SolverConfig::default()
        };
        let inputs = DiceInputs {
            dataset: &data,
            target: &target,
            mu0: mdp.mu0(),
            rewards: mdp.rewards(),
        };
        let sol = spectral_dice(&rep, &inputs, Regularizer::half_square(1e-3).unwrap(), &cfg).unwrap();
        let rho = policy_value_exact(&mdp, &target).unwrap();
        (sol.rho_hat, rho, sol, rep)
    }

    #[test]
    fn solver_estimates_value_with_exact_features() {
        let (rho_hat, rho, sol, _) = solve_on(1, 1 << 15, false);
        assert!((rho_hat - rho).abs() <= 0.02, "{rho_hat} vs {rho}");
        assert!(sol.gap_trace.iter().all(|(_, g)| g.is_finite()));
    }

    #[test]
    fn on_policy_ratio_is_near_one() {
        for seed in 0..5 {
            let (rho_hat, rho, sol, rep) = solve_on(seed, 1 << 15, true);
            assert!((rho_hat - rho).abs() <= 0.02, "seed {seed}: {rho_hat} vs {rho}");
            let zeta = zeta_table(&rep, &sol.omega_d).unwrap();
            for (x, z) in zeta.iter().enumerate() {
                if rep.q_pib[x] > 1.0 / 32.0 {
                    assert!((z - 1.0).abs() <= 0.05, "seed {seed} pair {x}: zeta {z}");
                }
            }
        }
    }

    #[test]
    fn single_pair_value_is_one() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![1.0], vec![1.0], 0.9).unwrap();
        let pi = Policy::uniform(1, 1);
        let rep = SpectralRep::new(
            1,
            1,
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            vec![1.0],
            crate::replearn::ReplearnMethod::Exact,
        )
        .unwrap();
        let data = sample_dataset(&mdp, &pi, 64, 0).unwrap();
        let inputs = DiceInputs {
            dataset: &data,
            target: &pi,
            mu0: mdp.mu0(),
            rewards: mdp.rewards(),
        };
        let cfg = SolverConfig {
            steps: 2000,
            batch_size: 16,
            ..SolverConfig::default()
        };
        let sol = spectral_dice(&rep, &inputs, Regularizer::half_square(1e-3).unwrap(), &cfg).unwrap();
        assert!((sol.rho_hat - 1.0).abs() <= 1e-3, "{}", sol.rho_hat);
    }

    #[test]
    fn solver_rejects_mismatched_inputs() {
        let (mdp, rep, target, data) = empirical_setup(8, 100);
        let short_mu0 = vec![1.0];
        let inputs = DiceInputs {
            dataset: &data,
            target: &target,
            mu0: &short_mu0,
            rewards: mdp.rewards(),
        };
        assert!(matches!(
            spectral_dice(&rep, &inputs, Regularizer::none(), &SolverConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
        let bad_cfg = SolverConfig {
            c_inf_bound: 0.5,
            ..SolverConfig::default()
        };
        let inputs = DiceInputs {
            mu0: mdp.mu0(),
            ..inputs
        };
        assert!(spectral_dice(&rep, &inputs, Regularizer::none(), &bad_cfg).is_err());
    }

    #[test]
    fn solver_is_deterministic() {
        let a = solve_on(3, 4096, false).2;
        let b = solve_on(3, 4096, false).2;
        assert_eq!(a, b);
    }

    #[test]
    fn random_points_have_larger_gap_than_solver_output() {
        let (mdp, rep, target, data) = empirical_setup(9, 1 << 14);
        let inputs = DiceInputs {
            dataset: &data,
            target: &target,
            mu0: mdp.mu0(),
            rewards: mdp.rewards(),
        };
        let reg = Regularizer::half_square(1e-3).unwrap();
        let cfg = SolverConfig {
            c_inf_bound: 20.0,
            precondition: false,
            ..SolverConfig::default()
        };
        let sol = spectral_dice(&rep, &inputs, reg, &cfg).unwrap();
        let obj = SaddleObjective::empirical(&rep, &inputs, reg).unwrap();
        let boxes = SaddleBoxes::for_dataset(&rep, &inputs, &cfg);
        let solved = duality_gap(
            &obj,
            &boxes,
            &DVector::from_column_slice(&sol.theta_q),
            &DVector::from_column_slice(&sol.omega_d),
            cfg.gap_probes,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let mut theta = DVector::from_fn(2, |_, _| rand::Rng::random_range(&mut rng, 0.0..10.0));
            let mut omega = DVector::from_fn(2, |_, _| rand::Rng::random_range(&mut rng, 0.0..3.0));
            boxes.theta.project(&mut theta);
            boxes.omega.project(&mut omega);
            assert!(duality_gap(&obj, &boxes, &theta, &omega, cfg.gap_probes) >= solved);
        }
    }

    #[test]
    fn simulation_identity_holds() {
        for seed in 0..3 {
            let (mdp, rep, target, behavior) = rank2(seed + 30);
            let exact = simulation_lemma_check(&mdp, &rep, &target).unwrap();
            assert!(exact.lhs.abs() <= 1e-10 && exact.rhs.abs() <= 1e-10);

            let opts = LowRankOptions::new(8, 2, 3, seed + 40);
            let (mdp3, _) = crate::envs::random_lowrank_mdp_with(&opts).unwrap();
            let rep1 = svd_representation(&mdp3, &target, &behavior, 1).unwrap();
            let check = simulation_lemma_check(&mdp3, &rep1, &target).unwrap();
            assert!(!check.clipped());
            assert!(check.lhs.abs() > 1e-6);
            assert!((check.lhs - check.rhs).abs() <= 1e-8);
            let _ = mdp;
        }
    }

    #[test]
    fn simulation_check_reports_clipping_and_degenerate_rows() {
        let (mdp, rep, target, _) = rank2(12);
        let mut noisy = rep.clone();
        noisy.mu_pi[(3, 0)] -= 5.0;
        let check = simulation_lemma_check(&mdp, &noisy, &target).unwrap();
        assert!(check.clipped());
        assert!((check.lhs - check.rhs).abs() <= 1e-8);

        let mut dead = rep.clone();
        dead.phi.row_mut(0).fill(0.0);
        assert!(matches!(
            simulation_lemma_check(&mdp, &dead, &target),
            Err(Error::DegenerateRow { state: 0, action: 0, .. })
        ));
    }
}
