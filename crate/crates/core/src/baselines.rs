//! Reference off-policy estimators.

use std::collections::BTreeMap;

use crate::dice::{spectral_dice, DiceInputs, DiceSolution, Regularizer, SolverConfig};
use crate::error::{Error, Result};
use crate::mdp::{policy_value_exact, Policy, TabularMdp, TrajectoryDataset, TransitionDataset};
use crate::replearn::SpectralRep;

/// Additive count smoothing for state-action pairs the data never visits.
pub const DEFAULT_SMOOTHING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub method: String,
    pub rho_hat: f64,
    pub n_used: usize,
    pub diagnostics: BTreeMap<String, f64>,
}

impl BaselineResult {
    fn new(method: &str, rho_hat: f64, n_used: usize) -> Result<Self> {
        if !rho_hat.is_finite() {
            return Err(Error::Divergence(format!("{method} produced a non-finite estimate")));
        }
        Ok(Self {
            method: method.to_string(),
            rho_hat,
            n_used,
            diagnostics: BTreeMap::new(),
        })
    }
}

/// Tabular DICE: the saddle solver with one-hot features, so that the
/// parameters are full `Q` and `zeta` tables.
pub fn direct_dice(
    inputs: &DiceInputs<'_>,
    reg: Regularizer,
    cfg: &SolverConfig,
) -> Result<(BaselineResult, DiceSolution)> {
    let (ns, na) = (inputs.target.n_states(), inputs.target.n_actions());
    inputs.dataset.validate(ns, na)?;
    if inputs.dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let rep = SpectralRep::identity(ns, na, inputs.dataset.pair_frequencies(ns, na))?;
    let sol = spectral_dice(&rep, inputs, reg, cfg)?;
    let mut result = BaselineResult::new("direct_dice", sol.rho_hat, inputs.dataset.len())?;
    result.diagnostics.insert("final_gap".into(), sol.final_gap);
    Ok((result, sol))
}

/// Count-based model of the dynamics. Rows of unvisited pairs get `smoothing`
/// pseudo-counts on every next state, which makes them uniform.
pub fn empirical_model(
    dataset: &TransitionDataset,
    n_states: usize,
    n_actions: usize,
    mu0: &[f64],
    rewards: &[f64],
    smoothing: f64,
) -> Result<TabularMdp> {
    dataset.validate(n_states, n_actions)?;
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "smoothing must be positive, got {smoothing}"
        )));
    }
    let mut counts = vec![0.0; n_states * n_actions * n_states];
    for t in &dataset.transitions {
        counts[(t.s * n_actions + t.a) * n_states + t.s_next] += 1.0;
    }
    for row in counts.chunks_mut(n_states) {
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            row.fill(smoothing);
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|c| *c /= total);
    }
    TabularMdp::new(
        n_states,
        n_actions,
        counts,
        rewards.to_vec(),
        mu0.to_vec(),
        dataset.gamma_used,
    )
}

/// Exact value of the target policy in the count-based model.
pub fn model_based(
    dataset: &TransitionDataset,
    target: &Policy,
    mu0: &[f64],
    rewards: &[f64],
    smoothing: f64,
) -> Result<BaselineResult> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let (ns, na) = (target.n_states(), target.n_actions());
    let model = empirical_model(dataset, ns, na, mu0, rewards, smoothing)?;
    let rho = policy_value_exact(&model, target)?;
    let mut result = BaselineResult::new("model_based", rho, dataset.len())?;
    let visited = dataset
        .pair_frequencies(ns, na)
        .iter()
        .filter(|&&f| f > 0.0)
        .count();
    result
        .diagnostics
        .insert("unvisited_pairs".into(), (ns * na - visited) as f64);
    Ok(result)
}

/// Trajectory-wise importance sampling: each trajectory's discounted return
/// is weighted by the product of its per-step likelihood ratios, then
/// rescaled by `(1-gamma)/(1-gamma^H)` so a constant unit reward gives 1.
pub fn importance_sampling(
    data: &TrajectoryDataset,
    target: &Policy,
    behavior: &Policy,
) -> Result<BaselineResult> {
    if data.trajectories.is_empty() {
        return Err(Error::InvalidArgument("no trajectories".into()));
    }
    let gamma = data.gamma_used;
    let horizon = data.horizon;
    let mut weights = Vec::with_capacity(data.trajectories.len());
    let mut estimates = Vec::with_capacity(data.trajectories.len());
    for traj in &data.trajectories {
        if traj.len() != horizon {
            return Err(Error::InvalidArgument(format!(
                "trajectory of length {} in a horizon-{horizon} dataset",
                traj.len()
            )));
        }
        let mut w = 1.0;
        let mut ret = 0.0;
        let mut disc = 1.0;
        for step in traj {
            let pb = behavior.prob(step.s, step.a);
            if pb == 0.0 {
                return Err(Error::ZeroBehaviorProbability {
                    state: step.s,
                    action: step.a,
                });
            }
            w *= target.prob(step.s, step.a) / pb;
            ret += disc * step.r;
            disc *= gamma;
        }
        weights.push(w);
        estimates.push(w * ret);
    }
    let n = weights.len() as f64;
    let scale = (1.0 - gamma) / (1.0 - gamma.powi(horizon as i32));
    let rho = scale * estimates.iter().sum::<f64>() / n;
    let mean_w = weights.iter().sum::<f64>() / n;
    let var_w = weights.iter().map(|w| (w - mean_w).powi(2)).sum::<f64>() / n;
    let mut result = BaselineResult::new("importance_sampling", rho, data.trajectories.len())?;
    result.diagnostics.insert("weight_mean".into(), mean_w);
    result.diagnostics.insert("weight_variance".into(), var_w);
    Ok(result)
}
