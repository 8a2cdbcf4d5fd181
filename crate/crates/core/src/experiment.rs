//! JSON configuration, per-agent orchestration, reports and oracle comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matkit::{
    from_rows, min_norm_least_squares, norm2, spectral_radius, to_rows, Mat, Vector, DEFAULT_RANK_TOL,
};
use crate::offpolicy::{
    opt_history_csv, run_algorithm1, stab_history_csv, AgentSpec, Algorithm1Agent, LearnSettings, OffPolicyScheme,
};
use crate::oracle::{agent_oracle, beta_sequence, check_transmission_condition, AgentOracle, ALPHA_MAX};
use crate::plant::{
    fmt_f64, simulate_behavior, simulate_closed_loop, FollowerModel, InitialState, LeaderModel, MasModel, NoiseSpec,
    Topology, TrajectoryLog,
};
use crate::qlearn::{opt_history_q_csv, run_algorithm2, Algorithm2Agent, QScheme};
use crate::regulator::{assemble_model_based, RegulatorSettings};

/// Which learning pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "1")]
    OffPolicy,
    #[serde(rename = "2")]
    QLearning,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::OffPolicy),
            "2" => Ok(Self::QLearning),
            other => Err(Error::Config(format!("unknown algorithm '{other}' (expected 1 or 2)"))),
        }
    }
}

/// Step-size scheme; `1`/`2` belong to the off-policy pipeline, `A`/`B`/`C`
/// to Q-learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    A,
    B,
    C,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            "C" | "c" => Ok(Self::C),
            other => Err(Error::Config(format!(
                "unknown scheme '{other}' (expected 1, 2, A, B or C)"
            ))),
        }
    }
}

impl Scheme {
    pub fn algorithm(self) -> Algorithm {
        match self {
            Self::One | Self::Two => Algorithm::OffPolicy,
            _ => Algorithm::QLearning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderSpec {
    pub e: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowerSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    /// Initial behavior gain; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<Vec<Vec<f64>>>,
}

/// `a_{to,from} = weight`; node 0 is the leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    List(Vec<f64>),
    Range { start: f64, step: f64, floor: f64 },
}

impl BetaSpec {
    fn values(&self) -> Vec<f64> {
        match self {
            Self::List(v) => v.clone(),
            Self::Range { start, step, floor } => beta_sequence(*start, *step, *floor),
        }
    }
}

fn default_one() -> f64 {
    1.0
}
fn default_alpha_max() -> f64 {
    ALPHA_MAX
}
fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}
fn default_reg_iter() -> usize {
    200_000
}
fn default_stab_iter() -> usize {
    10_000
}
fn default_opt_iter() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningSpec {
    pub algorithm: Algorithm,
    pub scheme: Scheme,
    pub t0: usize,
    /// End of the data window; the smallest admissible one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_f: Option<usize>,
    pub alpha0: f64,
    pub beta_sequence: BetaSpec,
    pub a: f64,
    #[serde(default = "default_one")]
    pub lambda_bar: f64,
    #[serde(default = "default_alpha_max")]
    pub alpha_max: f64,
    pub eps1: f64,
    pub eps2: f64,
    /// `κ = c / ρ(ΩᵀΩ)`.
    #[serde(default = "default_one")]
    pub kappa_c: f64,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default = "default_stab_iter")]
    pub max_stab_iter: usize,
    #[serde(default = "default_opt_iter")]
    pub max_opt_iter: usize,
    #[serde(default = "default_reg_iter")]
    pub max_regulator_iter: usize,
}

/// The on-disk schema. Matrices are row-major arrays of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub leader: LeaderSpec,
    pub v0: Vec<f64>,
    pub followers: Vec<FollowerSpec>,
    pub edges: Vec<EdgeSpec>,
    pub noise: NoiseSpec,
    pub learning: LearningSpec,
    /// Last time step of the behavior log.
    pub collect_until: usize,
    /// Closed-loop steps simulated after deployment.
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub file: ConfigFile,
    pub mas: MasModel,
    pub q: Vec<Mat>,
    pub r: Vec<Mat>,
    pub k0: Vec<Mat>,
    pub init: InitialState,
    pub learn: LearnSettings,
    pub regulator: RegulatorSettings,
}

fn mat(rows: &[Vec<f64>], what: &str) -> Result<Mat> {
    from_rows(rows).map_err(|e| Error::Config(format!("{what}: {e}")))
}

impl ConfigFile {
    /// The four-agent chain example: oscillating followers tracking a
    /// rotating exosystem.
    pub fn paper_sec6() -> Self {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let followers = (1..=4)
            .map(|i| FollowerSpec {
                a: vec![vec![0.0, 1.0], vec![-1.0, -0.2 * i as f64]],
                b: if i <= 2 {
                    vec![vec![0.0], vec![1.0]]
                } else {
                    vec![vec![1.0], vec![0.0]]
                },
                c: vec![vec![1.0, 0.0]],
                s: vec![vec![1.0]],
                q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                r: vec![vec![1.0]],
                x0: vec![5.0, -5.0],
                k0: None,
            })
            .collect();
        Self {
            leader: LeaderSpec {
                e: vec![vec![c, s], vec![-s, c]],
                f: vec![vec![-1.0, 0.0]],
            },
            v0: vec![3.0, 3.0],
            followers,
            edges: (1..=4)
                .map(|i| EdgeSpec {
                    from: i - 1,
                    to: i,
                    weight: 1.0,
                })
                .collect(),
            noise: NoiseSpec::default_exploration(),
            learning: LearningSpec {
                algorithm: Algorithm::OffPolicy,
                scheme: Scheme::Two,
                t0: 85,
                t_f: None,
                alpha0: 1e-4,
                beta_sequence: BetaSpec::Range {
                    start: 0.5,
                    step: 0.01,
                    floor: 0.01,
                },
                a: 0.5,
                lambda_bar: 1.0,
                alpha_max: ALPHA_MAX,
                eps1: 1e-4,
                eps2: 1e-4,
                kappa_c: 1.0,
                rank_tol: DEFAULT_RANK_TOL,
                max_stab_iter: default_stab_iter(),
                max_opt_iter: default_opt_iter(),
                max_regulator_iter: default_reg_iter(),
            },
            collect_until: 150,
            horizon: 400,
            out: None,
        }
    }

    pub fn validate(self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_file(self)
    }
}

impl ExperimentConfig {
    pub fn from_file(file: ConfigFile) -> Result<Self> {
        let l = &file.learning;
        if l.scheme.algorithm() != l.algorithm {
            return Err(Error::Config(format!(
                "scheme {:?} does not belong to algorithm {:?}",
                l.scheme, l.algorithm
            )));
        }
        if !(l.a > 0.0 && l.a < 1.0) {
            return Err(Error::Config(format!("a = {} must lie in (0, 1)", l.a)));
        }
        for (name, v) in [
            ("alpha0", l.alpha0),
            ("eps1", l.eps1),
            ("eps2", l.eps2),
            ("rank_tol", l.rank_tol),
            ("alpha_max", l.alpha_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(l.lambda_bar >= 1.0) {
            return Err(Error::Config(format!(
                "lambda_bar = {} must be at least 1",
                l.lambda_bar
            )));
        }
        if !(l.kappa_c > 0.0 && l.kappa_c < 2.0) {
            return Err(Error::Config(format!("kappa_c = {} must lie in (0, 2)", l.kappa_c)));
        }
        let betas = l.beta_sequence.values();
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0)) || betas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(
                "beta_sequence must be positive and strictly decreasing".into(),
            ));
        }
        if let Some(t_f) = l.t_f {
            if t_f <= l.t0 || t_f + 1 > file.collect_until {
                return Err(Error::Config(format!(
                    "need t0 < t_f < collect_until (t0 = {}, t_f = {t_f}, collect_until = {})",
                    l.t0, file.collect_until
                )));
            }
        } else if l.t0 + 1 >= file.collect_until {
            return Err(Error::Config("collect_until leaves no room for a data window".into()));
        }

        let leader = LeaderModel::new(mat(&file.leader.e, "leader.e")?, mat(&file.leader.f, "leader.f")?)?;
        let mut followers = Vec::new();
        let (mut q, mut r, mut k0, mut x0) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, fs) in file.followers.iter().enumerate() {
            let tag = |m: &str| format!("followers[{i}].{m}");
            let f = FollowerModel::new(
                mat(&fs.a, &tag("a"))?,
                mat(&fs.b, &tag("b"))?,
                mat(&fs.c, &tag("c"))?,
                mat(&fs.s, &tag("s"))?,
            )?;
            let qi = mat(&fs.q, &tag("q"))?;
            let ri = mat(&fs.r, &tag("r"))?;
            let ki = match &fs.k0 {
                Some(rows) => mat(rows, &tag("k0"))?,
                None => Mat::zeros(f.m(), f.n()),
            };
            if ki.shape() != (f.m(), f.n()) || fs.x0.len() != f.n() {
                return Err(Error::Config(format!("agent {}: k0 or x0 has wrong shape", i + 1)));
            }
            AgentSpec::new(i, &f, qi.clone(), ri.clone())?;
            if !crate::matkit::is_positive_definite(&ri, 0.0) || crate::matkit::min_eigenvalue(&qi) < 0.0 {
                return Err(Error::Config(format!("agent {}: need Q ⪰ 0 and R ≻ 0", i + 1)));
            }
            x0.push(Vector::from_vec(fs.x0.clone()));
            followers.push(f);
            q.push(qi);
            r.push(ri);
            k0.push(ki);
        }
        let edges: Vec<(usize, usize, f64)> = file.edges.iter().map(|e| (e.to, e.from, e.weight)).collect();
        let topology = Topology::from_edges(followers.len(), &edges)?;
        let mas = MasModel::new(leader, followers, topology)?;
        if file.v0.len() != mas.leader.nv() {
            return Err(Error::Config("v0 length differs from the exosystem order".into()));
        }
        check_assumptions(&mas, &q, &r)?;
        let init = InitialState::cold(&mas, Vector::from_vec(file.v0.clone()), x0);
        let learn = LearnSettings {
            alpha0: l.alpha0,
            beta_sequence: betas,
            a: l.a,
            lambda_bar: l.lambda_bar,
            alpha_max: l.alpha_max,
            eps1: l.eps1,
            max_stab_iter: l.max_stab_iter,
            max_opt_iter: l.max_opt_iter,
            rank_tol: l.rank_tol,
        };
        let regulator = RegulatorSettings {
            eps2: l.eps2,
            c: l.kappa_c,
            max_iter: l.max_regulator_iter,
        };
        Ok(Self {
            file,
            mas,
            q,
            r,
            k0,
            init,
            learn,
            regulator,
        })
    }

    pub fn paper_sec6() -> Self {
        ConfigFile::paper_sec6()
            .validate()
            .expect("built-in configuration is valid")
    }

    pub fn agent_spec(&self, i: usize) -> Result<AgentSpec> {
        AgentSpec::new(i, &self.mas.followers[i], self.q[i].clone(), self.r[i].clone())
    }

    pub fn behavior_log(&self) -> Result<TrajectoryLog> {
        let noise = vec![self.file.noise.clone(); self.mas.n_agents()];
        simulate_behavior(&self.mas, &self.init, &self.k0, &noise, self.file.collect_until)
            .map_err(|e| e.in_stage("behavior simulation", 0))
    }
}

/// Stabilizability, transmission zeros, spanning tree and a marginally
/// stable exosystem, each reported by name.
pub fn check_assumptions(mas: &MasModel, q: &[Mat], r: &[Mat]) -> Result<()> {
    for (i, f) in mas.followers.iter().enumerate() {
        crate::oracle::dare(&f.a, &f.b, &q[i], &r[i])
            .map_err(|e| Error::Assumption(format!("agent {}: (A, B) does not appear stabilizable ({e})", i + 1)))?;
        check_transmission_condition(f, &mas.leader.e)
            .map_err(|e| Error::Assumption(format!("agent {}: transmission condition fails ({e})", i + 1)))?;
    }
    if !mas.topology.has_spanning_tree() {
        return Err(Error::Assumption(
            "graph has no directed spanning tree rooted at the leader".into(),
        ));
    }
    let rho = spectral_radius(&mas.leader.e)?;
    if rho > 1.0 + 1e-9 {
        return Err(Error::Assumption(format!(
            "exosystem spectral radius {rho:.6} exceeds 1"
        )));
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let file: ConfigFile = serde_json::from_str(&text)?;
    file.validate()
}

/// One agent's run in either pipeline.
#[derive(Debug, Clone)]
pub enum AgentRun {
    OffPolicy(Box<Algorithm1Agent>),
    QLearning(Box<Algorithm2Agent>),
}

impl AgentRun {
    pub fn k(&self) -> &Mat {
        match self {
            Self::OffPolicy(a) => &a.k,
            Self::QLearning(a) => &a.k,
        }
    }

    pub fn t(&self) -> &Mat {
        match self {
            Self::OffPolicy(a) => &a.t,
            Self::QLearning(a) => &a.t,
        }
    }

    pub fn x(&self) -> &Mat {
        match self {
            Self::OffPolicy(a) => &a.x,
            Self::QLearning(a) => &a.x,
        }
    }

    pub fn u(&self) -> &Mat {
        match self {
            Self::OffPolicy(a) => &a.u,
            Self::QLearning(a) => &a.u,
        }
    }

    pub fn t_f(&self) -> usize {
        match self {
            Self::OffPolicy(a) => a.t_f,
            Self::QLearning(a) => a.t_f,
        }
    }

    /// `K̃⁰ … K̃^final` from the stabilizing phase.
    pub fn stab_gains(&self) -> Vec<Mat> {
        match self {
            Self::OffPolicy(a) => a.stab.gains(),
            Self::QLearning(a) => a.stab.gains(),
        }
    }

    pub fn stab_gain(&self) -> &Mat {
        match self {
            Self::OffPolicy(a) => &a.stab.outcome.gain,
            Self::QLearning(a) => &a.stab.outcome.gain,
        }
    }

    pub fn stab_final_index(&self) -> usize {
        match self {
            Self::OffPolicy(a) => a.stab.outcome.final_index,
            Self::QLearning(a) => a.stab.outcome.final_index,
        }
    }

    pub fn beta(&self) -> f64 {
        match self {
            Self::OffPolicy(a) => a.stab.beta,
            Self::QLearning(a) => a.stab.beta,
        }
    }

    pub fn alphas(&self) -> &[f64] {
        match self {
            Self::OffPolicy(a) => &a.stab.outcome.ledger.alphas,
            Self::QLearning(a) => &a.stab.outcome.ledger.alphas,
        }
    }

    pub fn opt_final_index(&self) -> usize {
        match self {
            Self::OffPolicy(a) => a.opt.final_index,
            Self::QLearning(a) => a.opt.final_index,
        }
    }

    /// `P^j` per optimal-phase step.
    pub fn opt_values(&self) -> Vec<Mat> {
        match self {
            Self::OffPolicy(a) => a.opt.steps.iter().map(|s| s.value.p.clone()).collect(),
            Self::QLearning(a) => a.opt.steps.iter().map(|s| s.p.clone()).collect(),
        }
    }

    /// `K^j` per optimal-phase step.
    pub fn opt_gains(&self) -> Vec<Mat> {
        match self {
            Self::OffPolicy(a) => a.opt.steps.iter().map(|s| s.gain.clone()).collect(),
            Self::QLearning(a) => a.opt.steps.iter().map(|s| s.gain.clone()).collect(),
        }
    }

    /// `H^j` per optimal-phase step; the off-policy pipeline learns none.
    pub fn opt_h(&self) -> Vec<Mat> {
        match self {
            Self::OffPolicy(_) => Vec::new(),
            Self::QLearning(a) => a.opt.steps.iter().map(|s| s.h.clone()).collect(),
        }
    }

    pub fn chi_history(&self) -> String {
        match self {
            Self::OffPolicy(a) => a.regulator.history_csv(),
            Self::QLearning(a) => a.regulator.history_csv(),
        }
    }

    pub fn chi(&self) -> &Vector {
        match self {
            Self::OffPolicy(a) => &a.regulator.chi,
            Self::QLearning(a) => &a.regulator.chi,
        }
    }

    pub fn regulator_iterations(&self) -> usize {
        match self {
            Self::OffPolicy(a) => a.regulator.iterations,
            Self::QLearning(a) => a.regulator.iterations,
        }
    }

    fn basis(&self) -> &crate::regulator::RegulatorBasis {
        match self {
            Self::OffPolicy(a) => &a.basis,
            Self::QLearning(a) => &a.basis,
        }
    }

    fn stab_csv(&self, model: &FollowerModel) -> String {
        match self {
            Self::OffPolicy(a) => stab_history_csv(&a.stab.outcome, Some(model)),
            Self::QLearning(a) => stab_history_csv(&a.stab.outcome, Some(model)),
        }
    }

    fn bounds_csv(&self) -> String {
        let mut out = String::new();
        match self {
            Self::OffPolicy(a) => {
                out.push_str("k,alpha_bar_1,alpha_bar_2\n");
                for b in &a.stab.bounds {
                    let _ = writeln!(out, "{},{},{}", b.k, fmt_f64(b.pseudo), fmt_f64(b.monotone));
                }
            }
            Self::QLearning(a) => {
                out.push_str("k,alpha_bar_A,alpha_bar_B,alpha_bar_C\n");
                for b in &a.stab.bounds {
                    let _ = writeln!(out, "{},{},{},{}", b.k, fmt_f64(b.a), fmt_f64(b.b), fmt_f64(b.c));
                }
            }
        }
        out
    }
}

/// Per-agent results plus the deployed closed loop.
#[derive(Debug, Clone)]
pub struct LearnedGains {
    pub algorithm: Algorithm,
    pub scheme: Scheme,
    pub agents: Vec<AgentRun>,
    pub behavior: TrajectoryLog,
    /// Time at which `u = −K̂x + T̂ζ` takes over.
    pub deploy_t: usize,
    pub tracking: TrajectoryLog,
}

impl LearnedGains {
    /// `(t, max_i ‖e_i(t)‖∞)` after deployment.
    pub fn tracking_errors(&self) -> Vec<(usize, f64)> {
        self.tracking.max_error_series()
    }

    /// First deployment-relative step from which the error stays below `tol`.
    pub fn settling_step(&self, tol: f64) -> Option<usize> {
        let series = self.tracking_errors();
        let last_bad = series.iter().rposition(|(_, e)| *e >= tol);
        match last_bad {
            None => Some(0),
            Some(i) if i + 1 < series.len() => Some(series[i + 1].0 - self.deploy_t),
            Some(_) => None,
        }
    }
}

/// Runs the configured pipeline for every agent and deploys the result.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<LearnedGains> {
    let behavior = cfg.behavior_log()?;
    let l = &cfg.file.learning;
    let mut agents = Vec::with_capacity(cfg.mas.n_agents());
    for i in 0..cfg.mas.n_agents() {
        let spec = cfg.agent_spec(i)?;
        let run = match l.scheme {
            Scheme::One | Scheme::Two => {
                let scheme = if l.scheme == Scheme::One {
                    OffPolicyScheme::One
                } else {
                    OffPolicyScheme::Two
                };
                AgentRun::OffPolicy(Box::new(run_algorithm1(
                    &behavior,
                    &spec,
                    &cfg.k0[i],
                    l.t0,
                    l.t_f,
                    scheme,
                    &cfg.learn,
                    &cfg.regulator,
                )?))
            }
            s => {
                let scheme = match s {
                    Scheme::A => QScheme::A,
                    Scheme::B => QScheme::B,
                    _ => QScheme::C,
                };
                AgentRun::QLearning(Box::new(run_algorithm2(
                    &behavior,
                    &spec,
                    &cfg.k0[i],
                    l.t0,
                    l.t_f,
                    scheme,
                    &cfg.learn,
                    &cfg.regulator,
                )?))
            }
        };
        agents.push(run);
    }
    for (i, (run, f)) in agents.iter().zip(&cfg.mas.followers).enumerate() {
        let rho = spectral_radius(&(&f.a - &f.b * run.k()))?;
        if rho >= 1.0 {
            return Err(Error::NotStabilizing { rho }.in_stage("gain verification", i + 1));
        }
    }
    let deploy_t = agents.iter().map(AgentRun::t_f).max().unwrap_or(l.t0) + 1;
    let start = behavior.state_at(deploy_t)?;
    let k: Vec<Mat> = agents.iter().map(|a| a.k().clone()).collect();
    let t: Vec<Mat> = agents.iter().map(|a| a.t().clone()).collect();
    let tracking = simulate_closed_loop(&cfg.mas, &start, deploy_t, &k, &t, cfg.file.horizon)?;
    Ok(LearnedGains {
        algorithm: l.algorithm,
        scheme: l.scheme,
        agents,
        behavior,
        deploy_t,
        tracking,
    })
}

/// Model-based references for every agent.
pub fn oracle_solutions(cfg: &ExperimentConfig) -> Result<Vec<AgentOracle>> {
    cfg.mas
        .followers
        .iter()
        .enumerate()
        .map(|(i, f)| {
            agent_oracle(f, &cfg.mas.leader.e, &cfg.mas.leader.f, &cfg.q[i], &cfg.r[i])
                .map_err(|e| e.in_stage("oracle", i + 1))
        })
        .collect()
}

/// Error series against the oracle for one agent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleComparison {
    pub agent: usize,
    pub p_err: Vec<f64>,
    pub k_err: Vec<f64>,
    pub h_err: Vec<f64>,
    pub chi_err: Vec<f64>,
}

impl OracleComparison {
    pub fn final_p(&self) -> f64 {
        self.p_err.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_h(&self) -> Option<f64> {
        self.h_err.last().copied()
    }
}

/// `‖P^j − P*‖`, `‖K^j − K*‖`, `‖H^j − H*‖` per optimal-phase step and the
/// final `‖χⁿ − χ*‖`, where `χ*` solves the model-based system on the same
/// basis.
pub fn compare_with_oracle(cfg: &ExperimentConfig, learned: &LearnedGains) -> Result<Vec<OracleComparison>> {
    let oracles = oracle_solutions(cfg)?;
    let mut out = Vec::new();
    for (i, (run, or)) in learned.agents.iter().zip(&oracles).enumerate() {
        let f = &cfg.mas.followers[i];
        let m_weight = f.a.transpose() * &or.p;
        let problem = assemble_model_based(&m_weight, f, &cfg.mas.leader.e, run.basis())?;
        let chi_star = min_norm_least_squares(&problem.omega, &problem.eta, 1e-12)?.x;
        let mut k_err: Vec<f64> = run.opt_gains().iter().map(|k| norm2(&(k - &or.k))).collect();
        k_err.push(norm2(&(run.k() - &or.k)));
        out.push(OracleComparison {
            agent: i + 1,
            p_err: run.opt_values().iter().map(|p| norm2(&(p - &or.p))).collect(),
            k_err,
            h_err: run.opt_h().iter().map(|h| norm2(&(h - &or.h))).collect(),
            chi_err: vec![(run.chi() - chi_star).norm()],
        });
    }
    Ok(out)
}

/// Long-format CSV: `agent,series,iter,error`.
pub fn comparison_csv(rows: &[OracleComparison]) -> String {
    let mut out = String::from("agent,series,iter,error\n");
    for r in rows {
        for (name, series) in [("P", &r.p_err), ("K", &r.k_err), ("H", &r.h_err), ("chi", &r.chi_err)] {
            for (j, e) in series.iter().enumerate() {
                let _ = writeln!(out, "{},{name},{j},{}", r.agent, fmt_f64(*e));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentReport {
    pub agent: usize,
    pub t_f: usize,
    pub beta: f64,
    pub alphas: Vec<f64>,
    pub stabilizing_index: usize,
    pub stabilizing_gain: Vec<Vec<f64>>,
    pub stabilizing_rho: f64,
    pub optimal_index: usize,
    pub k: Vec<Vec<f64>>,
    pub t: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub rho: f64,
    pub p_err: f64,
    pub k_err: f64,
    pub h_err: Option<f64>,
    pub regulator_residual: f64,
    pub regulator_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub algorithm: Algorithm,
    pub scheme: Scheme,
    pub deploy_t: usize,
    pub agents: Vec<AgentReport>,
    pub final_tracking_error: f64,
    pub settling_1e2: Option<usize>,
    pub settling_1e4: Option<usize>,
}

pub fn build_report(cfg: &ExperimentConfig, learned: &LearnedGains) -> Result<Report> {
    let cmp = compare_with_oracle(cfg, learned)?;
    let oracles = oracle_solutions(cfg)?;
    let mut agents = Vec::new();
    for (i, run) in learned.agents.iter().enumerate() {
        let f = &cfg.mas.followers[i];
        agents.push(AgentReport {
            agent: i + 1,
            t_f: run.t_f(),
            beta: run.beta(),
            alphas: run.alphas().to_vec(),
            stabilizing_index: run.stab_final_index(),
            stabilizing_gain: to_rows(run.stab_gain()),
            stabilizing_rho: spectral_radius(&(&f.a - &f.b * run.stab_gain()))?,
            optimal_index: run.opt_final_index(),
            k: to_rows(run.k()),
            t: to_rows(run.t()),
            x: to_rows(run.x()),
            u: to_rows(run.u()),
            rho: spectral_radius(&(&f.a - &f.b * run.k()))?,
            p_err: cmp[i].final_p(),
            k_err: norm2(&(run.k() - &oracles[i].k)),
            h_err: cmp[i].final_h(),
            regulator_residual: crate::oracle::regulator_residual(
                f,
                &cfg.mas.leader.e,
                &cfg.mas.leader.f,
                run.x(),
                run.u(),
            ),
            regulator_iterations: run.regulator_iterations(),
        });
    }
    let series = learned.tracking_errors();
    Ok(Report {
        algorithm: learned.algorithm,
        scheme: learned.scheme,
        deploy_t: learned.deploy_t,
        agents,
        final_tracking_error: series.last().map(|s| s.1).unwrap_or(f64::NAN),
        settling_1e2: learned.settling_step(1e-2),
        settling_1e4: learned.settling_step(1e-4),
    })
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "algorithm {:?}, scheme {:?}, controllers deployed at t = {}",
            self.algorithm, self.scheme, self.deploy_t
        );
        for a in &self.agents {
            let _ = writeln!(
                out,
                "agent {}: t_f = {}, beta = {:.2}, stabilizing K^{} = {:?} (rho {:.4}), K* = {:?} (rho {:.4}), j = {}, |P-P*| = {:.3e}, regulator residual = {:.3e}",
                a.agent, a.t_f, a.beta, a.stabilizing_index, a.stabilizing_gain[0], a.stabilizing_rho, a.k[0], a.rho,
                a.optimal_index, a.p_err, a.regulator_residual
            );
        }
        let _ = writeln!(out, "final max tracking error {:.3e}", self.final_tracking_error);
        out
    }
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::write(dir.join(name), body)?;
    Ok(())
}

/// Writes logs, per-agent histories, the oracle comparison and the report.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, learned: &LearnedGains) -> Result<Report> {
    fs::create_dir_all(dir)?;
    learned.behavior.write_csv(&dir.join("behavior.csv"))?;
    learned.tracking.write_csv(&dir.join("tracking.csv"))?;
    let oracles = oracle_solutions(cfg)?;
    for (i, run) in learned.agents.iter().enumerate() {
        let f = &cfg.mas.followers[i];
        let tag = i + 1;
        write(dir, &format!("stab_history_agent{tag}.csv"), &run.stab_csv(f))?;
        write(dir, &format!("bounds_agent{tag}.csv"), &run.bounds_csv())?;
        write(dir, &format!("chi_history_agent{tag}.csv"), &run.chi_history())?;
        let opt = match run {
            AgentRun::OffPolicy(a) => {
                let steps: Vec<(usize, Mat, Mat)> = a
                    .opt
                    .steps
                    .iter()
                    .map(|s| (s.j, s.value.p.clone(), s.gain.clone()))
                    .collect();
                opt_history_csv(&steps, &oracles[i].p, &oracles[i].k)
            }
            AgentRun::QLearning(a) => opt_history_q_csv(&a.opt.steps, &oracles[i].p, &oracles[i].k, &oracles[i].h),
        };
        write(dir, &format!("opt_history_agent{tag}.csv"), &opt)?;
    }
    let cmp = compare_with_oracle(cfg, learned)?;
    write(dir, "oracle_comparison.csv", &comparison_csv(&cmp))?;
    let report = build_report(cfg, learned)?;
    write(dir, "report.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write(dir, "report.txt", &report.to_text())?;
    Ok(report)
}
