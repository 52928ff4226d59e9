//! Primal-dual spectral representations of the policy-conditioned
//! state-action kernel, and learners for them.
//!
//! A representation reconstructs the kernel as
//! `P_hat((s',a') | (s,a)) = q_pib(s',a') * <phi(s,a), mu_pi(s',a')>`,
//! where `q_pib` is the behavior occupancy. Three learners are provided: an
//! exact truncated SVD from the true tables, and two stochastic learners (least
//! squares and binary noise-contrastive estimation) that only see a
//! transition dataset.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::LowRankGroundTruth;
use crate::error::{Error, Result};
use crate::mdp::{occupancy_measure, state_action_kernel, Policy, TabularMdp, TransitionDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReplearnMethod {
    Svd,
    Ols,
    Nce,
    /// Ground-truth factors of a synthetic MDP.
    Exact,
    /// One-hot features; the tabular special case.
    Identity,
}

impl fmt::Display for ReplearnMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ReplearnMethod::Svd => "svd",
            ReplearnMethod::Ols => "ols",
            ReplearnMethod::Nce => "nce",
            ReplearnMethod::Exact => "exact",
            ReplearnMethod::Identity => "identity",
        };
        f.write_str(s)
    }
}

impl FromStr for ReplearnMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "svd" => Ok(ReplearnMethod::Svd),
            "ols" => Ok(ReplearnMethod::Ols),
            "nce" => Ok(ReplearnMethod::Nce),
            "exact" => Ok(ReplearnMethod::Exact),
            "identity" => Ok(ReplearnMethod::Identity),
            other => Err(Error::InvalidArgument(format!(
                "unknown representation method '{other}'"
            ))),
        }
    }
}

/// Learned or exact primal/dual feature tables.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralRep {
    pub n_states: usize,
    pub n_actions: usize,
    /// Primal features, `n_pairs x d`.
    pub phi: DMatrix<f64>,
    /// Policy-conditioned dual features, `n_pairs x d`.
    pub mu_pi: DMatrix<f64>,
    /// Reference weight `q(s) pi_b(a|s)`; sums to one.
    pub q_pib: Vec<f64>,
    pub method: ReplearnMethod,
    pub seed: u64,
    pub steps: usize,
}

impl SpectralRep {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        phi: DMatrix<f64>,
        mu_pi: DMatrix<f64>,
        q_pib: Vec<f64>,
        method: ReplearnMethod,
    ) -> Result<Self> {
        let n = n_states * n_actions;
        if phi.nrows() != n || mu_pi.nrows() != n || q_pib.len() != n {
            return Err(Error::InvalidArgument(format!(
                "feature tables must have {n} rows"
            )));
        }
        if phi.ncols() != mu_pi.ncols() || phi.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "primal and dual features need the same positive dimension".into(),
            ));
        }
        if phi.iter().chain(mu_pi.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature entry".into()));
        }
        check_weights(&q_pib)?;
        Ok(Self {
            n_states,
            n_actions,
            phi,
            mu_pi,
            q_pib,
            method,
            seed: 0,
            steps: 0,
        })
    }

    pub fn d(&self) -> usize {
        self.phi.ncols()
    }

    pub fn n_pairs(&self) -> usize {
        self.phi.nrows()
    }

    /// One-hot features: `phi = mu_pi = I`.
    pub fn identity(n_states: usize, n_actions: usize, q_pib: Vec<f64>) -> Result<Self> {
        let n = n_states * n_actions;
        Self::new(
            n_states,
            n_actions,
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            q_pib,
            ReplearnMethod::Identity,
        )
    }
}

fn check_weights(q: &[f64]) -> Result<()> {
    if q.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidArgument(
            "reference weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = q.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "reference weights sum to {total}, expected 1"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplearnConfig {
    pub method: ReplearnMethod,
    pub d: usize,
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Floor applied to inner products inside the contrastive logarithms.
    pub nce_clamp: f64,
    /// Relative spread of the random initialization around the constant
    /// table `1 / sqrt(d)`.
    pub init_spread: f64,
}

impl ReplearnConfig {
    pub fn ols(d: usize, seed: u64) -> Self {
        Self {
            method: ReplearnMethod::Ols,
            d,
            steps: 20_000,
            step_size: 0.5,
            batch_size: 1024,
            seed,
            nce_clamp: 1e-6,
            init_spread: 0.5,
        }
    }

    pub fn nce(d: usize, seed: u64) -> Self {
        Self {
            method: ReplearnMethod::Nce,
            step_size: 0.5,
            ..Self::ols(d, seed)
        }
    }

    fn validate(&self, expected: ReplearnMethod) -> Result<()> {
        if self.method != expected {
            return Err(Error::InvalidArgument(format!(
                "config method is {}, expected {expected}",
                self.method
            )));
        }
        if self.d == 0 {
            return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be >= 2".into()));
        }
        if !(self.nce_clamp >= 0.0) {
            return Err(Error::InvalidArgument("nce_clamp must be >= 0".into()));
        }
        Ok(())
    }
}

/// `G[(s,a), (s',a')] = P^pi((s',a') | (s,a)) / d^{pi_b}(s',a')`, with zero
/// columns where the behavior occupancy vanishes.
fn density_ratio_matrix(kernel: &DMatrix<f64>, d_b: &[f64], n_actions: usize) -> Result<DMatrix<f64>> {
    let n = kernel.nrows();
    let mut g = kernel.clone();
    for j in 0..n {
        if d_b[j] > 0.0 {
            g.column_mut(j).scale_mut(1.0 / d_b[j]);
            continue;
        }
        // Only rows the behavior actually visits can demand coverage.
        let reached = (0..n)
            .filter(|&i| d_b[i] > 0.0)
            .map(|i| kernel[(i, j)])
            .fold(0.0, f64::max);
        if reached > 0.0 {
            return Err(Error::Coverage {
                state: j / n_actions,
                action: j % n_actions,
                target_mass: reached,
            });
        }
        g.column_mut(j).fill(0.0);
    }
    Ok(g)
}

/// Top-`d` truncated SVD of the density-ratio matrix, with the singular
/// values absorbed into `phi` so that `mu_pi` has orthonormal columns.
pub fn svd_representation(
    mdp: &TabularMdp,
    target: &Policy,
    behavior: &Policy,
    d: usize,
) -> Result<SpectralRep> {
    let n = mdp.n_pairs();
    if d == 0 || d > n {
        return Err(Error::InvalidArgument(format!("rank {d} outside 1..={n}")));
    }
    let kernel = state_action_kernel(mdp, target)?;
    let d_b = occupancy_measure(mdp, behavior)?.values;
    let g = density_ratio_matrix(&kernel, &d_b, mdp.n_actions())?;
    let svd = g.svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut phi = DMatrix::zeros(n, d);
    let mut mu = DMatrix::zeros(n, d);
    for (k, &idx) in order.iter().take(d).enumerate() {
        let sigma = svd.singular_values[idx];
        phi.set_column(k, &(u.column(idx) * sigma));
        mu.set_column(k, &v_t.row(idx).transpose());
    }
    SpectralRep::new(
        mdp.n_states(),
        mdp.n_actions(),
        phi,
        mu,
        d_b,
        ReplearnMethod::Svd,
    )
}

/// Singular values of the density-ratio matrix, largest first.
pub fn density_ratio_spectrum(
    mdp: &TabularMdp,
    target: &Policy,
    behavior: &Policy,
) -> Result<Vec<f64>> {
    let kernel = state_action_kernel(mdp, target)?;
    let d_b = occupancy_measure(mdp, behavior)?.values;
    let g = density_ratio_matrix(&kernel, &d_b, mdp.n_actions())?;
    let mut sv: Vec<f64> = g.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values above `tol * largest`.
pub fn numerical_rank(spectrum: &[f64], tol: f64) -> usize {
    let top = spectrum.first().copied().unwrap_or(0.0);
    spectrum.iter().filter(|&&s| s > tol * top).count()
}

/// Ground-truth representation of a synthetic low-rank MDP, using the
/// behavior state occupancy as the auxiliary distribution.
pub fn ground_truth_representation(
    mdp: &TabularMdp,
    truth: &LowRankGroundTruth,
    target: &Policy,
    behavior: &Policy,
) -> Result<SpectralRep> {
    let d_b = occupancy_measure(mdp, behavior)?;
    let q = d_b.state_marginal();
    let mu_pi = truth.dual_features_pi(&q, target, behavior);
    SpectralRep::new(
        mdp.n_states(),
        mdp.n_actions(),
        truth.phi_star.clone(),
        mu_pi,
        d_b.values,
        ReplearnMethod::Exact,
    )
}

/// `P_hat[(s,a), (s',a')] = q_pib(s',a') <phi(s,a), mu_pi(s',a')>`, unclipped.
pub fn reconstruct_kernel(rep: &SpectralRep) -> DMatrix<f64> {
    let mut k = &rep.phi * rep.mu_pi.transpose();
    for (j, &q) in rep.q_pib.iter().enumerate() {
        k.column_mut(j).scale_mut(q);
    }
    k
}

/// `E_{(s,a) ~ d^{pi_b}} || P_hat(.|s,a) - P^pi(.|s,a) ||_1`, computed from
/// the exact tables.
pub fn replearn_error(
    rep: &SpectralRep,
    mdp: &TabularMdp,
    target: &Policy,
    behavior: &Policy,
) -> Result<f64> {
    if rep.n_pairs() != mdp.n_pairs() {
        return Err(Error::InvalidArgument(
            "representation and MDP sizes differ".into(),
        ));
    }
    let truth = state_action_kernel(mdp, target)?;
    let d_b = occupancy_measure(mdp, behavior)?.values;
    let approx = reconstruct_kernel(rep);
    let mut err = 0.0;
    for (i, &w) in d_b.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let row_err: f64 = approx
            .row(i)
            .iter()
            .zip(truth.row(i).iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        err += w * row_err;
    }
    Ok(err)
}

/// Per-sample indices into the feature tables for one learning step.
struct Batch {
    anchors: Vec<usize>,
    positives: Vec<usize>,
}

fn pair_index(s: usize, a: usize, n_actions: usize) -> usize {
    s * n_actions + a
}

fn draw_batch<R: Rng>(
    dataset: &TransitionDataset,
    target: &Policy,
    size: usize,
    rng: &mut R,
) -> Batch {
    let na = target.n_actions();
    let n = dataset.len();
    let mut anchors = Vec::with_capacity(size);
    let mut positives = Vec::with_capacity(size);
    for _ in 0..size {
        let t = dataset.transitions[rng.random_range(0..n)];
        // a' ~ pi(.|s') drawn afresh at every visit
        let a_next = target.sample(t.s_next, rng);
        anchors.push(pair_index(t.s, t.a, na));
        positives.push(pair_index(t.s_next, a_next, na));
    }
    Batch { anchors, positives }
}

fn init_tables<R: Rng>(n: usize, d: usize, spread: f64, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
    let base = 1.0 / (d as f64).sqrt();
    let mut draw = || base * (1.0 + spread * (2.0 * rng.random::<f64>() - 1.0));
    let phi = DMatrix::from_fn(n, d, |_, _| draw());
    let mu = DMatrix::from_fn(n, d, |_, _| draw());
    (phi, mu)
}

fn check_learner_inputs(dataset: &TransitionDataset, target: &Policy, q_pib: &[f64]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    dataset.validate(target.n_states(), target.n_actions())?;
    if q_pib.len() != target.n_states() * target.n_actions() {
        return Err(Error::InvalidArgument(
            "reference weights do not match the policy shape".into(),
        ));
    }
    check_weights(q_pib)
}

fn dot_rows(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|k| a[(i, k)] * b[(j, k)]).sum()
}

/// Least-squares spectral learning by mini-batch SGD on
/// `E[(phi(s,a)^T mu(s~,a~))^2] - 2 E[phi(s,a)^T mu(s',a')]`.
///
/// The squared term pairs every anchor in a batch with every other anchor
/// (self-pairs excluded), which is an unbiased estimate of the product-measure
/// expectation under the behavior occupancy.
pub fn ols_replearn(
    dataset: &TransitionDataset,
    target: &Policy,
    cfg: &ReplearnConfig,
    q_pib: &[f64],
) -> Result<SpectralRep> {
    cfg.validate(ReplearnMethod::Ols)?;
    check_learner_inputs(dataset, target, q_pib)?;
    let n = target.n_states() * target.n_actions();
    let d = cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut phi, mut mu) = init_tables(n, d, cfg.init_spread, &mut rng);
    let b = cfg.batch_size;
    let pair_w = 2.0 / (b as f64 * (b as f64 - 1.0));
    let pos_w = 2.0 / b as f64;

    let mut grad_phi = DMatrix::zeros(n, d);
    let mut grad_mu = DMatrix::zeros(n, d);
    for step in 0..cfg.steps {
        let batch = draw_batch(dataset, target, b, &mut rng);
        let mut s_phi = DMatrix::<f64>::zeros(d, d);
        let mut s_mu = DMatrix::<f64>::zeros(d, d);
        for &x in &batch.anchors {
            for k in 0..d {
                for l in 0..d {
                    s_phi[(k, l)] += phi[(x, k)] * phi[(x, l)];
                    s_mu[(k, l)] += mu[(x, k)] * mu[(x, l)];
                }
            }
        }
        grad_phi.fill(0.0);
        grad_mu.fill(0.0);
        let mut loss = 0.0;
        let mut g_phi = vec![0.0; d];
        let mut g_mu = vec![0.0; d];
        for (&x, &y) in batch.anchors.iter().zip(&batch.positives) {
            let self_dot = dot_rows(&phi, x, &mu, x);
            let pos = dot_rows(&phi, x, &mu, y);
            // sum over j != x of (phi_x . mu_j) mu_j, and symmetrically for mu_x
            let mut quad = 0.0;
            for k in 0..d {
                let mut a = 0.0;
                let mut c = 0.0;
                for l in 0..d {
                    a += s_mu[(k, l)] * phi[(x, l)];
                    c += s_phi[(k, l)] * mu[(x, l)];
                }
                quad += phi[(x, k)] * a;
                g_phi[k] = (a - mu[(x, k)] * self_dot) * pair_w;
                g_mu[k] = (c - phi[(x, k)] * self_dot) * pair_w;
            }
            loss += 0.5 * pair_w * (quad - self_dot * self_dot) - pos_w * pos;
            for k in 0..d {
                grad_phi[(x, k)] += g_phi[k] - pos_w * mu[(y, k)];
                grad_mu[(x, k)] += g_mu[k];
                grad_mu[(y, k)] -= pos_w * phi[(x, k)];
            }
        }
        if !loss.is_finite() || grad_phi.iter().chain(grad_mu.iter()).any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "least-squares objective became non-finite at step {step}"
            )));
        }
        phi.zip_apply(&grad_phi, |p, g| *p -= cfg.step_size * g);
        mu.zip_apply(&grad_mu, |p, g| *p -= cfg.step_size * g);
    }
    finish(target, phi, mu, q_pib, cfg)
}

/// Binary noise-contrastive learning by mini-batch SGD on
/// `E_pos[log(1 + 1/f)] + E_neg[log(1 + f)]`, `f = phi(s,a)^T mu(s',a')`.
///
/// Negatives pair each anchor with a dataset `(s, a)` drawn uniformly, so the
/// negative distribution is the behavior occupancy and the population optimum
/// is `f = P^pi / d^{pi_b}`.
pub fn nce_replearn(
    dataset: &TransitionDataset,
    target: &Policy,
    cfg: &ReplearnConfig,
    q_pib: &[f64],
) -> Result<SpectralRep> {
    cfg.validate(ReplearnMethod::Nce)?;
    check_learner_inputs(dataset, target, q_pib)?;
    let n = target.n_states() * target.n_actions();
    let na = target.n_actions();
    let d = cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut phi, mut mu) = init_tables(n, d, cfg.init_spread, &mut rng);
    let b = cfg.batch_size;
    let w = 1.0 / b as f64;
    let clamp = cfg.nce_clamp;

    let mut grad_phi = DMatrix::zeros(n, d);
    let mut grad_mu = DMatrix::zeros(n, d);
    for step in 0..cfg.steps {
        let batch = draw_batch(dataset, target, b, &mut rng);
        grad_phi.fill(0.0);
        grad_mu.fill(0.0);
        let mut loss = 0.0;
        for (&x, &y) in batch.anchors.iter().zip(&batch.positives) {
            let neg = dataset.transitions[rng.random_range(0..dataset.len())];
            let z = pair_index(neg.s, neg.a, na);

            let (pair_loss, g_pos, g_neg) = nce_pair_terms(
                dot_rows(&phi, x, &mu, y),
                dot_rows(&phi, x, &mu, z),
                clamp,
                w,
            )
            .map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("step {step}: {msg}")),
                other => other,
            })?;
            loss += pair_loss;

            for k in 0..d {
                grad_phi[(x, k)] += g_pos * mu[(y, k)] + g_neg * mu[(z, k)];
                grad_mu[(y, k)] += g_pos * phi[(x, k)];
                grad_mu[(z, k)] += g_neg * phi[(x, k)];
            }
        }
        if !loss.is_finite() || grad_phi.iter().chain(grad_mu.iter()).any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "contrastive objective became non-finite at step {step}"
            )));
        }
        // The positive term's curvature blows up as f -> 0, so a single step
        // can overshoot by many orders of magnitude; cap each entry's move.
        let clip = |p: &mut f64, g: f64| *p -= (cfg.step_size * g).clamp(-NCE_MAX_UPDATE, NCE_MAX_UPDATE);
        phi.zip_apply(&grad_phi, clip);
        mu.zip_apply(&grad_mu, clip);
    }
    finish(target, phi, mu, q_pib, cfg)
}

/// Largest change of a single table entry in one contrastive step.
const NCE_MAX_UPDATE: f64 = 0.05;

/// Loss and weighted derivatives `(loss, dL/df_pos, dL/df_neg)` of one
/// positive/negative pair. Inner products are floored at `clamp` inside the
/// logarithms.
fn nce_pair_terms(raw_pos: f64, raw_neg: f64, clamp: f64, weight: f64) -> Result<(f64, f64, f64)> {
    let f_pos = raw_pos.max(clamp);
    let f_neg = raw_neg.max(clamp);
    let loss = (1.0 + 1.0 / f_pos).ln() + (1.0 + f_neg).ln();
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "contrastive loss is non-finite (positive inner product {raw_pos:e})"
        )));
    }
    // Below the floor the positive gradient is passed straight through so
    // the pair can recover; the negative term is flat there.
    let g_pos = -weight / (f_pos * (1.0 + f_pos));
    let g_neg = if raw_neg > clamp {
        weight / (1.0 + f_neg)
    } else {
        0.0
    };
    Ok((loss, g_pos, g_neg))
}

fn finish(
    target: &Policy,
    phi: DMatrix<f64>,
    mu: DMatrix<f64>,
    q_pib: &[f64],
    cfg: &ReplearnConfig,
) -> Result<SpectralRep> {
    let mut rep = SpectralRep::new(
        target.n_states(),
        target.n_actions(),
        phi,
        mu,
        q_pib.to_vec(),
        cfg.method,
    )
    .map_err(|e| Error::Divergence(format!("learned tables are invalid: {e}")))?;
    rep.seed = cfg.seed;
    rep.steps = cfg.steps;
    Ok(rep)
}

/// Dispatches on `cfg.method` for the dataset-driven learners.
pub fn learn_representation(
    dataset: &TransitionDataset,
    target: &Policy,
    cfg: &ReplearnConfig,
    q_pib: &[f64],
) -> Result<SpectralRep> {
    match cfg.method {
        ReplearnMethod::Ols => ols_replearn(dataset, target, cfg, q_pib),
        ReplearnMethod::Nce => nce_replearn(dataset, target, cfg, q_pib),
        other => Err(Error::InvalidArgument(format!(
            "{other} is not a dataset-driven learner"
        ))),
    }
}
