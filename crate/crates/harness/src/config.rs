//! Experiment configuration: a flat, sectioned `key = value` text file.
//!
//! ```text
//! # comments start with '#'
//! [env]
//! kind = lowrank          # four_rooms | lowrank | file
//! gamma = 0.9
//!
//! [policy]
//! target = 0.3            # epsilon around the optimal policy, `uniform`, or a policy file
//! behavior = uniform, 0.7 # one or more behavior specs
//!
//! [data]
//! n = 1024, 16384
//! seeds = 0, 1, 2, 3, 4
//!
//! [replearn]
//! method = ols
//! d = 2
//! ```
//!
//! Unknown sections or keys are rejected so that typos do not silently fall
//! back to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use spectral_dice::dice::{RegularizerKind, SolverConfig};
use spectral_dice::replearn::ReplearnMethod;

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    FourRooms {
        noise: f64,
        /// Goal state index; `None` picks the bottom-right cell.
        goal: Option<usize>,
    },
    LowRank {
        n_states: usize,
        n_actions: usize,
        rank: usize,
        seed: u64,
        reward_linear: bool,
    },
    File(PathBuf),
}

impl EnvSpec {
    pub fn label(&self) -> &'static str {
        match self {
            EnvSpec::FourRooms { .. } => "four_rooms",
            EnvSpec::LowRank { .. } => "lowrank",
            EnvSpec::File(_) => "file",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    /// Epsilon-greedy around the optimal policy of the environment.
    Epsilon(f64),
    Uniform,
    File(PathBuf),
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Epsilon(e) => write!(f, "eps{e}"),
            PolicySpec::Uniform => f.write_str("uniform"),
            PolicySpec::File(p) => write!(
                f,
                "{}",
                p.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default()
            ),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("uniform") {
            return Ok(PolicySpec::Uniform);
        }
        if let Ok(eps) = s.parse::<f64>() {
            if !(0.0..=1.0).contains(&eps) {
                return Err(format!("epsilon {eps} outside [0, 1]"));
            }
            return Ok(PolicySpec::Epsilon(eps));
        }
        if s.is_empty() {
            return Err("empty policy spec".into());
        }
        Ok(PolicySpec::File(PathBuf::from(s)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Baseline {
    DirectDice,
    ModelBased,
    ImportanceSampling,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::DirectDice => "direct_dice",
            Baseline::ModelBased => "model_based",
            Baseline::ImportanceSampling => "importance_sampling",
        }
    }
}

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "direct_dice" => Ok(Baseline::DirectDice),
            "model_based" => Ok(Baseline::ModelBased),
            "importance_sampling" | "is" => Ok(Baseline::ImportanceSampling),
            other => Err(format!("unknown baseline '{other}'")),
        }
    }
}

/// Dual box bound: a fixed number or a multiple of the exact
/// concentratability coefficient of each behavior policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CInfBound {
    Fixed(f64),
    Auto { factor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplearnSettings {
    pub method: ReplearnMethod,
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    /// Overrides the environment's discount when set.
    pub gamma: Option<f64>,
    pub target: PolicySpec,
    pub behaviors: Vec<PolicySpec>,
    pub n_list: Vec<usize>,
    pub d_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub seed_offset: u64,
    pub replearn: ReplearnSettings,
    pub regularizer: RegularizerKind,
    pub lambda: f64,
    /// Solver settings; the seed is replaced per cell.
    pub solver: SolverConfig,
    pub c_inf: CInfBound,
    pub baselines: Vec<Baseline>,
    pub is_trajectories: usize,
    pub is_horizon: usize,
    pub smoothing: f64,
    /// Step sizes tried by the `sweep` command.
    pub sweep_step_sizes: Vec<f64>,
    /// Write representations and solutions next to the results.
    pub save_artifacts: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::LowRank {
                n_states: 8,
                n_actions: 2,
                rank: 2,
                seed: 0,
                reward_linear: false,
            },
            gamma: None,
            target: PolicySpec::Epsilon(0.3),
            behaviors: vec![PolicySpec::Uniform],
            n_list: vec![1 << 10],
            d_list: vec![2],
            seeds: vec![0],
            seed_offset: 0,
            replearn: ReplearnSettings {
                method: ReplearnMethod::Ols,
                steps: 20_000,
                step_size: 0.5,
                batch_size: 1024,
            },
            regularizer: RegularizerKind::HalfSquare,
            lambda: 1e-3,
            solver: SolverConfig::default(),
            c_inf: CInfBound::Auto { factor: 2.0 },
            baselines: Vec::new(),
            is_trajectories: 400,
            is_horizon: 100,
            smoothing: spectral_dice::baselines::DEFAULT_SMOOTHING,
            sweep_step_sizes: vec![0.05, 0.1, 0.2, 0.4],
            save_artifacts: false,
            out_dir: PathBuf::from("out"),
        }
    }
}

type Sections = BTreeMap<String, BTreeMap<String, (usize, String)>>;

fn parse_sections(text: &str) -> Result<Sections, String> {
    let mut sections = Sections::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| format!("line {lineno}: unterminated section header"))?
                .trim()
                .to_string();
            sections.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {lineno}: expected key = value"))?;
        let section = current
            .clone()
            .ok_or_else(|| format!("line {lineno}: key outside any section"))?;
        let key = key.trim().to_string();
        let entries = sections.get_mut(&section).expect("section inserted above");
        if entries
            .insert(key.clone(), (lineno, value.trim().to_string()))
            .is_some()
        {
            return Err(format!("line {lineno}: duplicate key '{section}.{key}'"));
        }
    }
    Ok(sections)
}

/// Typed access to one section, tracking which keys were consumed.
struct Section<'a> {
    name: &'a str,
    entries: BTreeMap<String, (usize, String)>,
}

impl Section<'_> {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| {
                format!("line {line}: bad value for {}.{key} ('{v}'): {e}", self.name)
            }),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, String>
    where
        T::Err: fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|item| {
                    item.trim().parse().map_err(|e| {
                        format!(
                            "line {line}: bad list item for {}.{key} ('{}'): {e}",
                            self.name,
                            item.trim()
                        )
                    })
                })
                .collect::<Result<Vec<T>, String>>()
                .map(Some),
        }
    }

    fn finish(self) -> Result<(), String> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(format!("line {line}: unknown key '{}.{key}'", self.name)),
        }
    }
}

/// Accepts plain integers and powers of two written as `2^k`.
fn parse_count(s: &str) -> Result<usize, String> {
    let s = s.trim();
    if let Some(exp) = s.strip_prefix("2^") {
        let k: u32 = exp.parse().map_err(|_| format!("bad exponent in '{s}'"))?;
        return 1usize
            .checked_shl(k)
            .filter(|_| k < usize::BITS)
            .ok_or_else(|| format!("'{s}' overflows"));
    }
    s.parse().map_err(|_| format!("not a count: '{s}'"))
}

struct Count(usize);

impl FromStr for Count {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_count(s).map(Count)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut cfg = Self::parse(&text)
            .map_err(|msg| HarnessError::Config(format!("{}: {msg}", path.display())))?;
        // Relative file references are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let EnvSpec::File(p) = &mut cfg.env {
            rebase(p);
        }
        for spec in std::iter::once(&mut cfg.target).chain(cfg.behaviors.iter_mut()) {
            if let PolicySpec::File(p) = spec {
                rebase(p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut sections = parse_sections(text)?;
        let mut cfg = Self::default();
        let mut section = |name: &'static str| Section {
            name,
            entries: sections.remove(name).unwrap_or_default(),
        };

        let mut env = section("env");
        let kind: String = env.take("kind")?.unwrap_or_else(|| "lowrank".into());
        cfg.gamma = env.take("gamma")?;
        cfg.env = match kind.as_str() {
            "four_rooms" => EnvSpec::FourRooms {
                noise: env.take("noise")?.unwrap_or(0.1),
                goal: env.take("goal")?,
            },
            "lowrank" => EnvSpec::LowRank {
                n_states: env.take("n_states")?.unwrap_or(8),
                n_actions: env.take("n_actions")?.unwrap_or(2),
                rank: env.take("rank")?.unwrap_or(2),
                seed: env.take("seed")?.unwrap_or(0),
                reward_linear: env.take("reward_linear")?.unwrap_or(false),
            },
            "file" => EnvSpec::File(
                env.take::<PathBuf>("path")?
                    .ok_or("env.kind = file needs env.path")?,
            ),
            other => return Err(format!("unknown env.kind '{other}'")),
        };
        env.finish()?;

        let mut policy = section("policy");
        if let Some(t) = policy.take("target")? {
            cfg.target = t;
        }
        if let Some(b) = policy.take_list("behavior")? {
            cfg.behaviors = b;
        }
        policy.finish()?;

        let mut data = section("data");
        if let Some(n) = data.take_list::<Count>("n")? {
            cfg.n_list = n.into_iter().map(|c| c.0).collect();
        }
        if let Some(s) = data.take_list("seeds")? {
            cfg.seeds = s;
        }
        if let Some(o) = data.take("seed_offset")? {
            cfg.seed_offset = o;
        }
        data.finish()?;

        let mut rl = section("replearn");
        if let Some(m) = rl.take("method")? {
            cfg.replearn.method = m;
        }
        if let Some(d) = rl.take_list("d")? {
            cfg.d_list = d;
        }
        if let Some(v) = rl.take("steps")? {
            cfg.replearn.steps = v;
        }
        if let Some(v) = rl.take("step_size")? {
            cfg.replearn.step_size = v;
        }
        if let Some(v) = rl.take("batch_size")? {
            cfg.replearn.batch_size = v;
        }
        rl.finish()?;

        let mut sv = section("solver");
        if let Some(v) = sv.take("regularizer")? {
            cfg.regularizer = v;
        }
        if let Some(v) = sv.take("lambda")? {
            cfg.lambda = v;
        }
        let s = &mut cfg.solver;
        macro_rules! opt {
            ($key:literal, $field:expr) => {
                if let Some(v) = sv.take($key)? {
                    $field = v;
                }
            };
        }
        opt!("steps", s.steps);
        opt!("step_q", s.step_q);
        opt!("step_w", s.step_w);
        opt!("batch_size", s.batch_size);
        opt!("q_margin", s.q_margin);
        opt!("projection_passes", s.projection_passes);
        opt!("precondition", s.precondition);
        opt!("gap_every", s.gap_every);
        opt!("gap_probes", s.gap_probes);
        let factor: Option<f64> = sv.take("c_inf_factor")?;
        match sv.take::<String>("c_inf_bound")?.as_deref() {
            None | Some("auto") => {
                cfg.c_inf = CInfBound::Auto {
                    factor: factor.unwrap_or(2.0),
                }
            }
            Some(v) => {
                if factor.is_some() {
                    return Err("solver.c_inf_factor only applies to c_inf_bound = auto".into());
                }
                cfg.c_inf = CInfBound::Fixed(
                    v.parse()
                        .map_err(|_| format!("bad value for solver.c_inf_bound: '{v}'"))?,
                );
            }
        }
        sv.finish()?;

        let mut bl = section("baselines");
        if let Some(v) = bl.take::<String>("enabled")? {
            cfg.baselines = if v.trim().is_empty() || v.trim() == "none" {
                Vec::new()
            } else {
                v.split(',').map(str::parse).collect::<Result<_, _>>()?
            };
            cfg.baselines.sort();
            cfg.baselines.dedup();
        }
        if let Some(v) = bl.take("is_trajectories")? {
            cfg.is_trajectories = v;
        }
        if let Some(v) = bl.take("is_horizon")? {
            cfg.is_horizon = v;
        }
        if let Some(v) = bl.take("smoothing")? {
            cfg.smoothing = v;
        }
        bl.finish()?;

        let mut sw = section("sweep");
        if let Some(v) = sw.take_list("step_sizes")? {
            cfg.sweep_step_sizes = v;
        }
        sw.finish()?;

        let mut out = section("output");
        if let Some(v) = out.take("dir")? {
            cfg.out_dir = v;
        }
        if let Some(v) = out.take("save_artifacts")? {
            cfg.save_artifacts = v;
        }
        out.finish()?;

        if let Some(name) = sections.keys().next() {
            return Err(format!("unknown section [{name}]"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let nonempty = [
            ("policy.behavior", self.behaviors.is_empty()),
            ("data.n", self.n_list.is_empty()),
            ("replearn.d", self.d_list.is_empty()),
            ("data.seeds", self.seeds.is_empty()),
            ("sweep.step_sizes", self.sweep_step_sizes.is_empty()),
        ];
        if let Some((name, _)) = nonempty.iter().find(|(_, empty)| *empty) {
            return Err(format!("{name} must not be empty"));
        }
        if self.n_list.contains(&0) {
            return Err("data.n values must be >= 1".into());
        }
        if self.d_list.contains(&0) {
            return Err("replearn.d values must be >= 1".into());
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(format!("env.gamma must lie in (0, 1), got {g}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err("solver.lambda must be >= 0".into());
        }
        match self.c_inf {
            CInfBound::Fixed(c) if !(c >= 1.0) => {
                return Err("solver.c_inf_bound must be >= 1".into())
            }
            CInfBound::Auto { factor } if !(factor >= 1.0) => {
                return Err("solver.c_inf_factor must be >= 1".into())
            }
            _ => {}
        }
        if self.sweep_step_sizes.iter().any(|&e| !(e > 0.0)) {
            return Err("sweep.step_sizes must be positive".into());
        }
        if self.baselines.contains(&Baseline::ImportanceSampling)
            && (self.is_trajectories == 0 || self.is_horizon == 0)
        {
            return Err("importance sampling needs positive trajectory count and horizon".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of every setting that affects results (the output
    /// directory is excluded), truncated to 16 characters.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let digest = Sha256::digest(format!("{canonical:?}").as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// 64-bit seed from a list of labelled parts.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
