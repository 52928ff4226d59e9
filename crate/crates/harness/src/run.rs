//! Experiment commands: dataset generation, evaluation sweeps and kernel
//! dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use spectral_dice::baselines::{direct_dice, importance_sampling, model_based};
use spectral_dice::dice::{spectral_dice, DiceInputs, Regularizer};
use spectral_dice::envs::{
    epsilon_greedy_optimal, four_rooms, four_rooms_default_goal, random_lowrank_mdp_with,
    GridLayout, LowRankGroundTruth, LowRankOptions,
};
use spectral_dice::mdp::{
    concentratability, policy_value_exact, sample_dataset, sample_trajectories, Policy,
    TabularMdp, TransitionDataset,
};
use spectral_dice::persist;
use spectral_dice::replearn::{
    ground_truth_representation, learn_representation, reconstruct_kernel, replearn_error,
    svd_representation, ReplearnConfig, ReplearnMethod, SpectralRep,
};

use crate::config::{derive_seed, Baseline, CInfBound, EnvSpec, ExperimentConfig, PolicySpec};
use crate::HarnessError;

pub const RESULTS_HEADER: &str = "config_hash,cell,env,behavior,method,rep,n,d,seed,rho_hat,\
rho_true,abs_error,relative_error,replearn_error,final_gap,status";

/// The environment together with everything derived from it that does not
/// depend on the data.
pub struct Setup {
    pub mdp: TabularMdp,
    pub truth: Option<LowRankGroundTruth>,
    pub layout: Option<GridLayout>,
    pub target: Policy,
    pub behaviors: Vec<BehaviorSetup>,
    pub rho_true: f64,
}

pub struct BehaviorSetup {
    pub label: String,
    pub policy: Policy,
    pub rho: f64,
    pub c_inf: f64,
}

fn policy_from_spec(spec: &PolicySpec, mdp: &TabularMdp) -> Result<Policy, HarnessError> {
    let policy = match spec {
        PolicySpec::Epsilon(eps) => epsilon_greedy_optimal(mdp, *eps)?,
        PolicySpec::Uniform => Policy::uniform(mdp.n_states(), mdp.n_actions()),
        PolicySpec::File(path) => persist::read_policy(path)?,
    };
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(HarnessError::Config(format!(
            "policy '{spec}' does not match the environment's shape"
        )));
    }
    Ok(policy)
}

impl Setup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let gamma = cfg.gamma.unwrap_or(0.9);
        let (mdp, truth, layout) = match &cfg.env {
            EnvSpec::FourRooms { noise, goal } => {
                let goal = goal.unwrap_or_else(four_rooms_default_goal);
                (four_rooms(*noise, goal, gamma)?, None, Some(GridLayout::four_rooms()))
            }
            EnvSpec::LowRank {
                n_states,
                n_actions,
                rank,
                seed,
                reward_linear,
            } => {
                let opts = LowRankOptions::new(*n_states, *n_actions, *rank, *seed)
                    .gamma(gamma)
                    .reward_linear(*reward_linear);
                let (mdp, truth) = random_lowrank_mdp_with(&opts)?;
                (mdp, Some(truth), None)
            }
            EnvSpec::File(path) => {
                let mdp = persist::read_mdp(path)?;
                let mdp = match cfg.gamma {
                    Some(g) => mdp.with_gamma(g)?,
                    None => mdp,
                };
                (mdp, None, None)
            }
        };
        let target = policy_from_spec(&cfg.target, &mdp)?;
        let rho_true = policy_value_exact(&mdp, &target)?;
        let behaviors = cfg
            .behaviors
            .iter()
            .map(|spec| {
                let policy = policy_from_spec(spec, &mdp)?;
                let rho = policy_value_exact(&mdp, &policy)?;
                let c_inf = match cfg.c_inf {
                    CInfBound::Fixed(c) => c,
                    CInfBound::Auto { factor } => {
                        (factor * concentratability(&mdp, &target, &policy)?).max(1.0)
                    }
                };
                Ok(BehaviorSetup {
                    label: spec.to_string(),
                    policy,
                    rho,
                    c_inf,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Ok(Self {
            mdp,
            truth,
            layout,
            target,
            behaviors,
            rho_true,
        })
    }
}

/// One unit of work: a behavior policy, a sample size, a feature dimension
/// and a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub index: usize,
    pub behavior: usize,
    pub n: usize,
    pub d_index: usize,
    pub d: usize,
    pub seed: u64,
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for behavior in 0..cfg.behaviors.len() {
        for &n in &cfg.n_list {
            for (d_index, &d) in cfg.d_list.iter().enumerate() {
                for &seed in &cfg.seeds {
                    out.push(Cell {
                        index: out.len(),
                        behavior,
                        n,
                        d_index,
                        d,
                        seed,
                    });
                }
            }
        }
    }
    out
}

fn dataset_name(behavior: usize, n: usize, seed: u64) -> String {
    format!("b{behavior}_n{n}_s{seed}.csv")
}

/// Data depends only on (behavior, N, seed), so every feature dimension and
/// every method of a sweep sees the same sample.
fn dataset_seed(cfg: &ExperimentConfig, behavior: usize, n: usize, seed: u64) -> u64 {
    derive_seed(&[
        "data",
        &behavior.to_string(),
        &n.to_string(),
        &seed.wrapping_add(cfg.seed_offset).to_string(),
    ])
}

fn cell_seed(hash: &str, cell: &Cell, stage: &str) -> u64 {
    derive_seed(&[hash, &cell.index.to_string(), stage])
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn sample_for(
    cfg: &ExperimentConfig,
    setup: &Setup,
    behavior: usize,
    n: usize,
    seed: u64,
) -> Result<TransitionDataset, HarnessError> {
    let b = &setup.behaviors[behavior];
    Ok(sample_dataset(&setup.mdp, &b.policy, n, dataset_seed(cfg, behavior, n, seed))?
        .with_behavior_id(b.label.clone()))
}

/// Writes one dataset per (behavior, N, seed) under `<out>/data` plus a
/// manifest listing them. Returns the manifest path.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    let setup = Setup::build(cfg)?;
    let data_dir = cfg.out_dir.join("data");
    fs::create_dir_all(&data_dir).map_err(io_err(&data_dir))?;
    let mut manifest = String::from("path,behavior,n,seed\n");
    for behavior in 0..setup.behaviors.len() {
        for &n in &cfg.n_list {
            for &seed in &cfg.seeds {
                let data = sample_for(cfg, &setup, behavior, n, seed)?;
                let name = dataset_name(behavior, n, seed);
                persist::write_dataset(&data_dir.join(&name), &data)?;
                let _ = writeln!(
                    manifest,
                    "data/{name},{},{n},{seed}",
                    setup.behaviors[behavior].label
                );
            }
        }
    }
    let path = cfg.out_dir.join("manifest.csv");
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub cell: usize,
    pub behavior: String,
    pub method: String,
    pub rep: String,
    pub n: usize,
    pub d: Option<usize>,
    pub seed: u64,
    pub rho_hat: Option<f64>,
    pub rho_true: f64,
    pub abs_error: Option<f64>,
    pub relative_error: Option<f64>,
    pub replearn_error: Option<f64>,
    pub final_gap: Option<f64>,
    pub status: String,
}

impl ResultRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_results(hash: &str, env: &str, rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{hash},{},{env},{},{},{},{},{},{},{},{:e},{},{},{},{},{}",
            r.cell,
            csv_field(&r.behavior),
            r.method,
            r.rep,
            r.n,
            r.d.map(|d| d.to_string()).unwrap_or_default(),
            r.seed,
            fmt_opt(r.rho_hat),
            r.rho_true,
            fmt_opt(r.abs_error),
            fmt_opt(r.relative_error),
            fmt_opt(r.replearn_error),
            fmt_opt(r.final_gap),
            csv_field(&r.status),
        );
    }
    out
}

struct CellContext<'a> {
    cfg: &'a ExperimentConfig,
    setup: &'a Setup,
    hash: &'a str,
    /// Solver step size override used by the sweep.
    step_size: Option<f64>,
    baselines: bool,
}

fn learn_rep(
    ctx: &CellContext<'_>,
    cell: &Cell,
    data: &TransitionDataset,
) -> Result<SpectralRep, HarnessError> {
    let setup = ctx.setup;
    let behavior = &setup.behaviors[cell.behavior].policy;
    let (ns, na) = (setup.mdp.n_states(), setup.mdp.n_actions());
    let settings = &ctx.cfg.replearn;
    let rep = match settings.method {
        ReplearnMethod::Ols | ReplearnMethod::Nce => {
            let seed = cell_seed(ctx.hash, cell, "replearn");
            let mut rc = match settings.method {
                ReplearnMethod::Ols => ReplearnConfig::ols(cell.d, seed),
                _ => ReplearnConfig::nce(cell.d, seed),
            };
            rc.steps = settings.steps;
            rc.step_size = settings.step_size;
            rc.batch_size = settings.batch_size;
            learn_representation(data, &setup.target, &rc, &data.pair_frequencies(ns, na))?
        }
        ReplearnMethod::Svd => svd_representation(&setup.mdp, &setup.target, behavior, cell.d)?,
        ReplearnMethod::Exact => {
            let truth = setup.truth.as_ref().ok_or_else(|| {
                HarnessError::Config("exact features need the lowrank environment".into())
            })?;
            ground_truth_representation(&setup.mdp, truth, &setup.target, behavior)?
        }
        ReplearnMethod::Identity => SpectralRep::identity(ns, na, data.pair_frequencies(ns, na))?,
    };
    Ok(rep)
}

fn run_cell(ctx: &CellContext<'_>, cell: &Cell) -> Vec<ResultRow> {
    let setup = ctx.setup;
    let cfg = ctx.cfg;
    let b = &setup.behaviors[cell.behavior];
    let value_gap = (b.rho - setup.rho_true).abs();
    let row = |method: &str, rep: &str, d: Option<usize>| ResultRow {
        cell: cell.index,
        behavior: b.label.clone(),
        method: method.to_string(),
        rep: rep.to_string(),
        n: cell.n,
        d,
        seed: cell.seed,
        rho_hat: None,
        rho_true: setup.rho_true,
        abs_error: None,
        relative_error: None,
        replearn_error: None,
        final_gap: None,
        status: "ok".into(),
    };
    let fill = |r: &mut ResultRow, rho_hat: f64| {
        let err = (rho_hat - setup.rho_true).abs();
        r.rho_hat = Some(rho_hat);
        r.abs_error = Some(err);
        r.relative_error = (value_gap > 0.0).then(|| err / value_gap);
    };

    let rep_label = cfg.replearn.method.to_string();
    let mut rows = Vec::new();
    let mut main = row("spectral_dice", &rep_label, Some(cell.d));
    let data = match load_or_sample(cfg, setup, cell) {
        Ok(d) => d,
        Err(e) => {
            main.status = format!("error: {e}");
            rows.push(main);
            return rows;
        }
    };
    let reg = match Regularizer::new(cfg.regularizer, cfg.lambda) {
        Ok(r) => r,
        Err(e) => {
            main.status = format!("error: {e}");
            rows.push(main);
            return rows;
        }
    };
    let inputs = DiceInputs {
        dataset: &data,
        target: &setup.target,
        mu0: setup.mdp.mu0(),
        rewards: setup.mdp.rewards(),
    };
    let mut solver = cfg.solver.clone();
    solver.c_inf_bound = b.c_inf;
    if let Some(eta) = ctx.step_size {
        solver.step_q = eta;
        solver.step_w = eta;
    }

    let outcome = learn_rep(ctx, cell, &data).and_then(|rep| {
        let rl_err = replearn_error(&rep, &setup.mdp, &setup.target, &b.policy).ok();
        let mut sc = solver.clone();
        sc.seed = cell_seed(ctx.hash, cell, "solver");
        let sol = spectral_dice(&rep, &inputs, reg, &sc);
        if cfg.save_artifacts {
            let dir = cfg.out_dir.join("artifacts").join(format!("cell{}", cell.index));
            persist::write_rep(&dir.join("rep"), &rep)?;
            if let Ok(sol) = &sol {
                persist::write_solution(&dir.join("solution"), sol)?;
            }
        }
        Ok((rl_err, sol))
    });
    match outcome {
        Ok((rl_err, sol)) => {
            main.replearn_error = rl_err;
            match sol {
                Ok(sol) => {
                    fill(&mut main, sol.rho_hat);
                    main.final_gap = Some(sol.final_gap);
                }
                Err(e) => main.status = format!("error: {e}"),
            }
        }
        Err(e) => main.status = format!("error: {e}"),
    }
    rows.push(main);

    // Baselines do not use features; run them once per (behavior, N, seed).
    if !ctx.baselines || cell.d_index != 0 {
        return rows;
    }
    for &baseline in &cfg.baselines {
        let mut r = row(baseline.name(), "", None);
        let result = match baseline {
            Baseline::DirectDice => {
                let mut sc = solver.clone();
                sc.seed = cell_seed(ctx.hash, cell, "direct_dice");
                direct_dice(&inputs, reg, &sc).map(|(res, sol)| {
                    r.final_gap = Some(sol.final_gap);
                    res
                })
            }
            Baseline::ModelBased => model_based(
                &data,
                &setup.target,
                setup.mdp.mu0(),
                setup.mdp.rewards(),
                cfg.smoothing,
            ),
            Baseline::ImportanceSampling => sample_trajectories(
                &setup.mdp,
                &b.policy,
                cfg.is_trajectories,
                cfg.is_horizon,
                derive_seed(&["trajectories", &dataset_seed(cfg, cell.behavior, cell.n, cell.seed).to_string()]),
            )
            .and_then(|traj| importance_sampling(&traj, &setup.target, &b.policy)),
        };
        match result {
            Ok(res) => fill(&mut r, res.rho_hat),
            Err(e) => r.status = format!("error: {e}"),
        }
        rows.push(r);
    }
    rows
}

/// Reads the dataset written by `generate` when present, otherwise samples
/// the identical dataset in memory.
fn load_or_sample(
    cfg: &ExperimentConfig,
    setup: &Setup,
    cell: &Cell,
) -> Result<TransitionDataset, HarnessError> {
    let path = cfg
        .out_dir
        .join("data")
        .join(dataset_name(cell.behavior, cell.n, cell.seed));
    if path.exists() {
        let data = persist::read_dataset(&path)?;
        data.validate(setup.mdp.n_states(), setup.mdp.n_actions())?;
        if data.len() != cell.n {
            return Err(HarnessError::Config(format!(
                "{} holds {} transitions, expected {}",
                path.display(),
                data.len(),
                cell.n
            )));
        }
        return Ok(data);
    }
    sample_for(cfg, setup, cell.behavior, cell.n, cell.seed)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))
}

fn evaluate_rows(
    cfg: &ExperimentConfig,
    setup: &Setup,
    jobs: usize,
    step_size: Option<f64>,
    baselines: bool,
) -> Result<Vec<ResultRow>, HarnessError> {
    let hash = cfg.hash();
    let ctx = CellContext {
        cfg,
        setup,
        hash: &hash,
        step_size,
        baselines,
    };
    let cells = cells(cfg);
    // `collect` on an indexed parallel iterator keeps the cell order.
    let per_cell: Vec<Vec<ResultRow>> =
        thread_pool(jobs)?.install(|| cells.par_iter().map(|c| run_cell(&ctx, c)).collect());
    Ok(per_cell.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSummary {
    pub results_path: PathBuf,
    pub rows: Vec<ResultRow>,
}

impl EvaluateSummary {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok()).count()
    }
}

/// Runs every cell and writes `<out>/results.csv`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, jobs: usize) -> Result<EvaluateSummary, HarnessError> {
    let setup = Setup::build(cfg)?;
    let rows = evaluate_rows(cfg, &setup, jobs, None, true)?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let path = cfg.out_dir.join("results.csv");
    let text = render_results(&cfg.hash(), cfg.env.label(), &rows);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(EvaluateSummary {
        results_path: path,
        rows,
    })
}

/// Re-runs the estimator for each configured solver step size. Writes the
/// full table of every run to `<out>/sweep/results_<i>.csv` and the median
/// absolute error per (step size, behavior, N, d) to `<out>/sweep.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<EvaluateSummary, HarnessError> {
    let setup = Setup::build(cfg)?;
    let hash = cfg.hash();
    let sweep_dir = cfg.out_dir.join("sweep");
    fs::create_dir_all(&sweep_dir).map_err(io_err(&sweep_dir))?;
    let mut summary = String::from("step_size,behavior,n,d,median_abs_error,ok,failed\n");
    let mut all_rows = Vec::new();
    for (i, &eta) in cfg.sweep_step_sizes.iter().enumerate() {
        let rows = evaluate_rows(cfg, &setup, jobs, Some(eta), false)?;
        let path = sweep_dir.join(format!("results_{i}.csv"));
        fs::write(&path, render_results(&hash, cfg.env.label(), &rows)).map_err(io_err(&path))?;
        for b in &setup.behaviors {
            for &n in &cfg.n_list {
                for &d in &cfg.d_list {
                    let group: Vec<&ResultRow> = rows
                        .iter()
                        .filter(|r| r.behavior == b.label && r.n == n && r.d == Some(d))
                        .collect();
                    let errs: Vec<f64> = group.iter().filter_map(|r| r.abs_error).collect();
                    let failed = group.len() - errs.len();
                    let _ = writeln!(
                        summary,
                        "{eta:e},{},{n},{d},{},{},{failed}",
                        csv_field(&b.label),
                        fmt_opt(median(&errs)),
                        errs.len()
                    );
                }
            }
        }
        all_rows.extend(rows);
    }
    let path = cfg.out_dir.join("sweep.csv");
    fs::write(&path, summary).map_err(io_err(&path))?;
    Ok(EvaluateSummary {
        results_path: path,
        rows: all_rows,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Writes the next-state distribution `P_hat(. | state, a)` implied by a
/// stored representation, for every action, as tidy CSV with columns
/// `state,action,next_state,row,col,prob`. On a grid environment `row` and
/// `col` locate the next state on the map; otherwise `row` is 0 and `col`
/// is the state index.
pub fn cmd_dump_kernel(
    cfg: &ExperimentConfig,
    rep_dir: &Path,
    state: usize,
    out: &Path,
) -> Result<(), HarnessError> {
    let rep = persist::read_rep(rep_dir)?;
    let layout = match cfg.env {
        EnvSpec::FourRooms { .. } => Some(GridLayout::four_rooms()),
        _ => None,
    };
    if let Some(l) = &layout {
        if l.n_states() != rep.n_states {
            return Err(HarnessError::Config(format!(
                "representation has {} states, the grid has {}",
                rep.n_states,
                l.n_states()
            )));
        }
    }
    if state >= rep.n_states {
        return Err(HarnessError::Argument(format!(
            "state {state} out of range (n_states = {})",
            rep.n_states
        )));
    }
    let kernel = reconstruct_kernel(&rep);
    let na = rep.n_actions;
    let mut text = String::from("state,action,next_state,row,col,prob\n");
    for a in 0..na {
        let i = state * na + a;
        for s_next in 0..rep.n_states {
            let p: f64 = (0..na).map(|a2| kernel[(i, s_next * na + a2)]).sum();
            let (row, col) = match &layout {
                Some(l) => l.cells[s_next],
                None => (0, s_next),
            };
            let _ = writeln!(text, "{state},{a},{s_next},{row},{col},{p:e}");
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(out, text).map_err(io_err(out))
}
