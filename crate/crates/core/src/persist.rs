//! Plain-text file formats for MDPs, policies, datasets, representations and
//! solutions.
//!
//! Numbers are written in Rust's shortest round-trip exponent form, so every
//! reader reproduces the written values bit for bit.
//!
//! * MDP: dimensions, then the transition rows, reward table and initial
//!   distribution as named blocks of whitespace-separated rows, then the
//!   discount. Policies use the same layout with a single `probs` block.
//! * Transition dataset: CSV with header `s,a,s_next` and a `<file>.meta`
//!   sidecar of `key=value` lines.
//! * Trajectory dataset: CSV `traj,t,s,a,r,s_next` plus the same sidecar.
//! * Representation: a directory holding `phi.csv`, `mu_pi.csv`, `q_pib.csv`
//!   and `meta.txt`.
//! * Solution: a directory holding `solution.txt`, `theta_q.csv`,
//!   `omega_d.csv` and `gap_trace.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::dice::DiceSolution;
use crate::error::{Error, Result};
use crate::mdp::{Policy, Step, TabularMdp, Transition, TrajectoryDataset, TransitionDataset};
use crate::replearn::{ReplearnMethod, SpectralRep};

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_value<T: FromStr>(path: &Path, line: usize, field: &str, text: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("cannot parse {field} from '{text}'")))
}

fn parse_row(path: &Path, line: usize, text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| parse_value(path, line, "number", t))
        .collect()
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_file(path)?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, "expected key=value"))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn write_key_values(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}={v}");
    }
    write_file(path, &s)
}

fn require<T: FromStr>(map: &BTreeMap<String, String>, path: &Path, key: &str) -> Result<T> {
    let v = map
        .get(key)
        .ok_or_else(|| Error::parse(path, 0, format!("missing key '{key}'")))?;
    parse_value(path, 0, key, v)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Dense matrix as headerless CSV, one row per line.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|&x| num(x)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_file(path, &s)
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_row(path, i + 1, line)?;
        if let Some(first) = rows.first() {
            let first: &Vec<f64> = first;
            if first.len() != row.len() {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn write_vector_csv(path: &Path, v: &[f64]) -> Result<()> {
    let mut s = String::new();
    for &x in v {
        let _ = writeln!(s, "{}", num(x));
    }
    write_file(path, &s)
}

fn read_vector_csv(path: &Path) -> Result<Vec<f64>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if !line.trim().is_empty() {
            out.push(parse_value(path, i + 1, "number", line)?);
        }
    }
    Ok(out)
}

/// Line-oriented reader for the MDP and policy formats.
struct Blocks<'a> {
    path: &'a Path,
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Blocks<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self { path, lines, pos: 0 }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        let line = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::parse(self.path, 0, "unexpected end of file"))?;
        self.pos += 1;
        Ok(line)
    }

    fn header<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let (no, line) = self.next_line()?;
        let rest = line
            .strip_prefix(key)
            .filter(|r| r.starts_with(char::is_whitespace))
            .ok_or_else(|| Error::parse(self.path, no, format!("expected '{key} <value>'")))?;
        parse_value(self.path, no, key, rest)
    }

    fn block(&mut self, key: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let (no, line) = self.next_line()?;
        if line != key {
            return Err(Error::parse(self.path, no, format!("expected block '{key}'")));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (no, line) = self.next_line()?;
            let row = parse_row(self.path, no, line)?;
            if row.len() != cols {
                return Err(Error::parse(
                    self.path,
                    no,
                    format!("expected {cols} values, found {}", row.len()),
                ));
            }
            out.extend(row);
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        match self.lines.get(self.pos) {
            Some(&(no, _)) => Err(Error::parse(self.path, no, "trailing content")),
            None => Ok(()),
        }
    }
}

fn push_rows(s: &mut String, values: &[f64], cols: usize) {
    for row in values.chunks(cols) {
        let row: Vec<String> = row.iter().map(|&x| num(x)).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
}

pub fn write_mdp(path: &Path, mdp: &TabularMdp) -> Result<()> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut s = format!("# tabular mdp\nn_states {ns}\nn_actions {na}\ntransition\n");
    push_rows(&mut s, mdp.transition(), ns);
    s.push_str("reward\n");
    push_rows(&mut s, mdp.rewards(), na);
    s.push_str("mu0\n");
    push_rows(&mut s, mdp.mu0(), ns);
    let _ = writeln!(s, "gamma {}", num(mdp.gamma()));
    write_file(path, &s)
}

pub fn read_mdp(path: &Path) -> Result<TabularMdp> {
    let text = read_file(path)?;
    let mut b = Blocks::new(path, &text);
    let ns: usize = b.header("n_states")?;
    let na: usize = b.header("n_actions")?;
    let transition = b.block("transition", ns * na, ns)?;
    let reward = b.block("reward", ns, na)?;
    let mu0 = b.block("mu0", 1, ns)?;
    let gamma: f64 = b.header("gamma")?;
    b.finish()?;
    TabularMdp::new(ns, na, transition, reward, mu0, gamma)
        .map_err(|e| Error::parse(path, 0, e.to_string()))
}

pub fn write_policy(path: &Path, policy: &Policy) -> Result<()> {
    let mut s = format!(
        "# policy\nn_states {}\nn_actions {}\nprobs\n",
        policy.n_states(),
        policy.n_actions()
    );
    push_rows(&mut s, policy.probs(), policy.n_actions());
    write_file(path, &s)
}

pub fn read_policy(path: &Path) -> Result<Policy> {
    let text = read_file(path)?;
    let mut b = Blocks::new(path, &text);
    let ns: usize = b.header("n_states")?;
    let na: usize = b.header("n_actions")?;
    let probs = b.block("probs", ns, na)?;
    b.finish()?;
    Policy::new(ns, na, probs).map_err(|e| Error::parse(path, 0, e.to_string()))
}

pub fn write_dataset(path: &Path, data: &TransitionDataset) -> Result<()> {
    let mut s = String::from("s,a,s_next\n");
    for t in &data.transitions {
        let _ = writeln!(s, "{},{},{}", t.s, t.a, t.s_next);
    }
    write_file(path, &s)?;
    write_key_values(
        &sidecar(path),
        &[
            ("n", data.len().to_string()),
            ("gamma", num(data.gamma_used)),
            ("behavior_id", data.behavior_id.clone()),
            ("seed", data.seed.to_string()),
        ],
    )
}

fn split_fields<'a>(path: &Path, no: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != n {
        return Err(Error::parse(
            path,
            no,
            format!("expected {n} fields, found {}", fields.len()),
        ));
    }
    Ok(fields)
}

fn check_header(path: &Path, text: &str, expected: &str) -> Result<()> {
    match text.lines().next() {
        Some(h) if h.trim() == expected => Ok(()),
        _ => Err(Error::parse(path, 1, format!("expected header '{expected}'"))),
    }
}

pub fn read_dataset(path: &Path) -> Result<TransitionDataset> {
    let text = read_file(path)?;
    check_header(path, &text, "s,a,s_next")?;
    let mut transitions = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f = split_fields(path, i + 1, line, 3)?;
        transitions.push(Transition {
            s: parse_value(path, i + 1, "s", f[0])?,
            a: parse_value(path, i + 1, "a", f[1])?,
            s_next: parse_value(path, i + 1, "s_next", f[2])?,
        });
    }
    let meta_path = sidecar(path);
    let meta = read_key_values(&meta_path)?;
    let n: usize = require(&meta, &meta_path, "n")?;
    if n != transitions.len() {
        return Err(Error::parse(
            &meta_path,
            0,
            format!("metadata lists {n} transitions, file has {}", transitions.len()),
        ));
    }
    Ok(TransitionDataset {
        transitions,
        gamma_used: require(&meta, &meta_path, "gamma")?,
        behavior_id: require(&meta, &meta_path, "behavior_id")?,
        seed: require(&meta, &meta_path, "seed")?,
    })
}

pub fn write_trajectories(path: &Path, data: &TrajectoryDataset) -> Result<()> {
    let mut s = String::from("traj,t,s,a,r,s_next\n");
    for (k, traj) in data.trajectories.iter().enumerate() {
        for (t, step) in traj.iter().enumerate() {
            let _ = writeln!(s, "{k},{t},{},{},{},{}", step.s, step.a, num(step.r), step.s_next);
        }
    }
    write_file(path, &s)?;
    write_key_values(
        &sidecar(path),
        &[
            ("n_trajectories", data.trajectories.len().to_string()),
            ("horizon", data.horizon.to_string()),
            ("gamma", num(data.gamma_used)),
            ("behavior_id", data.behavior_id.clone()),
            ("seed", data.seed.to_string()),
        ],
    )
}

pub fn read_trajectories(path: &Path) -> Result<TrajectoryDataset> {
    let text = read_file(path)?;
    check_header(path, &text, "traj,t,s,a,r,s_next")?;
    let mut trajectories: Vec<Vec<Step>> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let no = i + 1;
        let f = split_fields(path, no, line, 6)?;
        let k: usize = parse_value(path, no, "traj", f[0])?;
        let t: usize = parse_value(path, no, "t", f[1])?;
        if k == trajectories.len() {
            trajectories.push(Vec::new());
        }
        if k + 1 != trajectories.len() || t != trajectories[k].len() {
            return Err(Error::parse(path, no, "steps out of order"));
        }
        trajectories[k].push(Step {
            s: parse_value(path, no, "s", f[2])?,
            a: parse_value(path, no, "a", f[3])?,
            r: parse_value(path, no, "r", f[4])?,
            s_next: parse_value(path, no, "s_next", f[5])?,
        });
    }
    let meta_path = sidecar(path);
    let meta = read_key_values(&meta_path)?;
    let count: usize = require(&meta, &meta_path, "n_trajectories")?;
    if count != trajectories.len() {
        return Err(Error::parse(&meta_path, 0, "trajectory count mismatch"));
    }
    Ok(TrajectoryDataset {
        trajectories,
        horizon: require(&meta, &meta_path, "horizon")?,
        gamma_used: require(&meta, &meta_path, "gamma")?,
        behavior_id: require(&meta, &meta_path, "behavior_id")?,
        seed: require(&meta, &meta_path, "seed")?,
    })
}

pub fn write_rep(dir: &Path, rep: &SpectralRep) -> Result<()> {
    write_matrix_csv(&dir.join("phi.csv"), &rep.phi)?;
    write_matrix_csv(&dir.join("mu_pi.csv"), &rep.mu_pi)?;
    write_vector_csv(&dir.join("q_pib.csv"), &rep.q_pib)?;
    write_key_values(
        &dir.join("meta.txt"),
        &[
            ("n_states", rep.n_states.to_string()),
            ("n_actions", rep.n_actions.to_string()),
            ("d", rep.d().to_string()),
            ("method", rep.method.to_string()),
            ("seed", rep.seed.to_string()),
            ("steps", rep.steps.to_string()),
        ],
    )
}

pub fn read_rep(dir: &Path) -> Result<SpectralRep> {
    let meta_path = dir.join("meta.txt");
    let meta = read_key_values(&meta_path)?;
    let ns: usize = require(&meta, &meta_path, "n_states")?;
    let na: usize = require(&meta, &meta_path, "n_actions")?;
    let d: usize = require(&meta, &meta_path, "d")?;
    let method: ReplearnMethod = require(&meta, &meta_path, "method")?;
    let phi = read_matrix_csv(&dir.join("phi.csv"))?;
    let mu = read_matrix_csv(&dir.join("mu_pi.csv"))?;
    if phi.ncols() != d || mu.ncols() != d {
        return Err(Error::parse(&meta_path, 0, "feature width differs from d"));
    }
    let q = read_vector_csv(&dir.join("q_pib.csv"))?;
    let mut rep = SpectralRep::new(ns, na, phi, mu, q, method)
        .map_err(|e| Error::parse(&meta_path, 0, e.to_string()))?;
    rep.seed = require(&meta, &meta_path, "seed")?;
    rep.steps = require(&meta, &meta_path, "steps")?;
    Ok(rep)
}

pub fn write_solution(dir: &Path, sol: &DiceSolution) -> Result<()> {
    write_key_values(
        &dir.join("solution.txt"),
        &[
            ("rho_hat", num(sol.rho_hat)),
            ("iterations", sol.iterations.to_string()),
            ("final_gap", num(sol.final_gap)),
            ("max_box_violation", num(sol.max_box_violation)),
        ],
    )?;
    write_vector_csv(&dir.join("theta_q.csv"), &sol.theta_q)?;
    write_vector_csv(&dir.join("omega_d.csv"), &sol.omega_d)?;
    let mut s = String::from("iteration,gap\n");
    for (it, g) in &sol.gap_trace {
        let _ = writeln!(s, "{it},{}", num(*g));
    }
    write_file(&dir.join("gap_trace.csv"), &s)
}

pub fn read_solution(dir: &Path) -> Result<DiceSolution> {
    let meta_path = dir.join("solution.txt");
    let meta = read_key_values(&meta_path)?;
    let trace_path = dir.join("gap_trace.csv");
    let text = read_file(&trace_path)?;
    check_header(&trace_path, &text, "iteration,gap")?;
    let mut gap_trace = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f = split_fields(&trace_path, i + 1, line, 2)?;
        gap_trace.push((
            parse_value(&trace_path, i + 1, "iteration", f[0])?,
            parse_value(&trace_path, i + 1, "gap", f[1])?,
        ));
    }
    Ok(DiceSolution {
        theta_q: read_vector_csv(&dir.join("theta_q.csv"))?,
        omega_d: read_vector_csv(&dir.join("omega_d.csv"))?,
        rho_hat: require(&meta, &meta_path, "rho_hat")?,
        gap_trace,
        iterations: require(&meta, &meta_path, "iterations")?,
        final_gap: require(&meta, &meta_path, "final_gap")?,
        max_box_violation: require(&meta, &meta_path, "max_box_violation")?,
    })
}
