//! Leader/follower dynamics, communication graph and trajectory simulation.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matkit::{spectral_radius, Mat, Vector};
use crate::observer::{observer_step, ObserverState};

/// Default bound on state norms before a simulation is declared divergent.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// Follower `x(t+1) = A x + B u`, `y = C x + S u`.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerModel {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub s: Mat,
}

impl FollowerModel {
    pub fn new(a: Mat, b: Mat, c: Mat, s: Mat) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(Error::Dimension("A must be square and non-empty".into()));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B must have {n} rows and at least one column"
            )));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::Dimension(format!("C must have {n} columns")));
        }
        if s.nrows() != c.nrows() || s.ncols() != b.ncols() {
            return Err(Error::Dimension(format!("S must be {}x{}", c.nrows(), b.ncols())));
        }
        Ok(Self { a, b, c, s })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn ny(&self) -> usize {
        self.c.nrows()
    }

    /// `C̄ = [C, S]`.
    pub fn c_bar(&self) -> Mat {
        let mut cb = Mat::zeros(self.ny(), self.n() + self.m());
        cb.view_mut((0, 0), (self.ny(), self.n())).copy_from(&self.c);
        cb.view_mut((0, self.n()), (self.ny(), self.m())).copy_from(&self.s);
        cb
    }

    pub fn step(&self, x: &Vector, u: &Vector) -> Result<(Vector, Vector)> {
        if x.len() != self.n() || u.len() != self.m() {
            return Err(Error::Dimension(format!(
                "follower step: x has {} entries (want {}), u has {} (want {})",
                x.len(),
                self.n(),
                u.len(),
                self.m()
            )));
        }
        Ok((&self.a * x + &self.b * u, &self.c * x + &self.s * u))
    }

    /// `e = C x + S u + F v`.
    pub fn tracking_error(&self, f: &Mat, x: &Vector, u: &Vector, v: &Vector) -> Vector {
        &self.c * x + &self.s * u + f * v
    }
}

/// Leader exosystem `v(t+1) = E v`, `y_d = −F v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderModel {
    pub e: Mat,
    pub f: Mat,
}

impl LeaderModel {
    pub fn new(e: Mat, f: Mat) -> Result<Self> {
        if !e.is_square() || e.nrows() == 0 || f.ncols() != e.nrows() {
            return Err(Error::Dimension(format!(
                "leader: E is {}x{}, F is {}x{}",
                e.nrows(),
                e.ncols(),
                f.nrows(),
                f.ncols()
            )));
        }
        Ok(Self { e, f })
    }

    pub fn nv(&self) -> usize {
        self.e.nrows()
    }

    pub fn step(&self, v: &Vector) -> (Vector, Vector) {
        (&self.e * v, -(&self.f * v))
    }
}

/// Directed graph over nodes `0..=N`; node 0 is the leader.
///
/// `weights[(i, j)] = a_ij > 0` means node `i` receives from node `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    weights: Mat,
}

impl Topology {
    pub fn new(weights: Mat) -> Result<Self> {
        if !weights.is_square() || weights.nrows() < 2 {
            return Err(Error::Dimension(
                "topology needs a square weight matrix over leader + followers".into(),
            ));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("edge weights must be finite and nonnegative".into()));
        }
        if weights.row(0).iter().any(|w| *w != 0.0) {
            return Err(Error::Config("the leader (node 0) cannot receive messages".into()));
        }
        Ok(Self { weights })
    }

    /// Builds from `(receiver, sender, weight)` triples, nodes numbered from 0.
    pub fn from_edges(followers: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut w = Mat::zeros(followers + 1, followers + 1);
        for &(i, j, a) in edges {
            if i > followers || j > followers || i == j {
                return Err(Error::Config(format!("invalid edge {j} -> {i}")));
            }
            w[(i, j)] = a;
        }
        Self::new(w)
    }

    /// Leader pins follower 1, follower i listens to follower i−1.
    pub fn chain(followers: usize) -> Self {
        let edges: Vec<_> = (1..=followers).map(|i| (i, i - 1, 1.0)).collect();
        Self::from_edges(followers, &edges).expect("chain graph is valid")
    }

    pub fn followers(&self) -> usize {
        self.weights.nrows() - 1
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    /// In-degree from other followers.
    pub fn d(&self, i: usize) -> f64 {
        (1..=self.followers()).filter(|&j| j != i).map(|j| self.a(i, j)).sum()
    }

    pub fn mu(&self, i: usize) -> f64 {
        1.0 / (1.0 + self.d(i) + self.a(i, 0))
    }

    /// `𝓗 = L + diag(a_i0)` restricted to followers.
    pub fn h_matrix(&self) -> Mat {
        let n = self.followers();
        Mat::from_fn(n, n, |r, c| {
            let (i, j) = (r + 1, c + 1);
            if i == j {
                self.d(i) + self.a(i, 0)
            } else {
                -self.a(i, j)
            }
        })
    }

    /// `𝓗^μ = I − diag(μ) 𝓗`.
    pub fn h_mu(&self) -> Mat {
        let n = self.followers();
        let h = self.h_matrix();
        Mat::from_fn(n, n, |r, c| {
            let id = if r == c { 1.0 } else { 0.0 };
            id - self.mu(r + 1) * h[(r, c)]
        })
    }

    /// True when every follower is reachable from the leader.
    pub fn has_spanning_tree(&self) -> bool {
        let n = self.weights.nrows();
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(j) = queue.pop_front() {
            for i in 0..n {
                if !seen[i] && self.weights[(i, j)] > 0.0 {
                    seen[i] = true;
                    queue.push_back(i);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone)]
pub struct MasModel {
    pub leader: LeaderModel,
    pub followers: Vec<FollowerModel>,
    pub topology: Topology,
}

impl MasModel {
    pub fn new(leader: LeaderModel, followers: Vec<FollowerModel>, topology: Topology) -> Result<Self> {
        if followers.len() != topology.followers() {
            return Err(Error::Config(format!(
                "{} follower models but the graph has {} followers",
                followers.len(),
                topology.followers()
            )));
        }
        for (i, f) in followers.iter().enumerate() {
            if f.ny() != leader.f.nrows() {
                return Err(Error::Dimension(format!(
                    "agent {}: output dimension {} differs from leader's {}",
                    i + 1,
                    f.ny(),
                    leader.f.nrows()
                )));
            }
        }
        Ok(Self {
            leader,
            followers,
            topology,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.followers.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Wave {
    #[default]
    Sin,
    Cos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTerm {
    pub amplitude: f64,
    pub frequency: f64,
    #[serde(default)]
    pub wave: Wave,
}

/// Deterministic sum of sinusoids; input channel `c` is phase-shifted by
/// `c * channel_phase` so multi-input agents get distinct signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub terms: Vec<NoiseTerm>,
    #[serde(default = "default_channel_phase")]
    pub channel_phase: f64,
}

fn default_channel_phase() -> f64 {
    1.0
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            terms: Vec::new(),
            channel_phase: default_channel_phase(),
        }
    }

    /// `0.1 sin(16t) + 0.1 cos(11t)`.
    pub fn default_exploration() -> Self {
        Self {
            terms: vec![
                NoiseTerm {
                    amplitude: 0.1,
                    frequency: 16.0,
                    wave: Wave::Sin,
                },
                NoiseTerm {
                    amplitude: 0.1,
                    frequency: 11.0,
                    wave: Wave::Cos,
                },
            ],
            channel_phase: default_channel_phase(),
        }
    }

    pub fn value(&self, t: usize, channel: usize) -> f64 {
        let shift = channel as f64 * self.channel_phase;
        self.terms
            .iter()
            .map(|term| {
                let arg = term.frequency * t as f64 + shift;
                term.amplitude
                    * match term.wave {
                        Wave::Sin => arg.sin(),
                        Wave::Cos => arg.cos(),
                    }
            })
            .sum()
    }

    pub fn vector(&self, t: usize, m: usize) -> Vector {
        Vector::from_fn(m, |c, _| self.value(t, c))
    }

    pub fn bound(&self) -> f64 {
        self.terms.iter().map(|t| t.amplitude.abs()).sum()
    }
}

/// Per-agent control law applied during a simulation.
#[derive(Debug, Clone)]
pub enum Policy {
    /// `u_i = −K_i x_i + n_i(t)`.
    Behavior { k: Vec<Mat>, noise: Vec<NoiseSpec> },
    /// `u_i = −K_i x_i + T_i ζ_i`.
    Tracking { k: Vec<Mat>, t: Vec<Mat> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub v: Vector,
    pub x: Vec<Vector>,
    pub observer: ObserverState,
}

impl InitialState {
    /// Observer estimates all start at zero.
    pub fn cold(mas: &MasModel, v: Vector, x: Vec<Vector>) -> Self {
        let observer = ObserverState::zeros(mas);
        Self { v, x, observer }
    }
}

/// Everything recorded at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: usize,
    pub v: Vector,
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub noise: Vec<Vector>,
    pub error: Vec<Vector>,
    pub observer: ObserverState,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub steps: Vec<Snapshot>,
}

impl TrajectoryLog {
    pub fn first_t(&self) -> Option<usize> {
        self.steps.first().map(|s| s.t)
    }

    pub fn last_t(&self) -> Option<usize> {
        self.steps.last().map(|s| s.t)
    }

    pub fn at(&self, t: usize) -> Option<&Snapshot> {
        let t0 = self.first_t()?;
        self.steps.get(t.checked_sub(t0)?)
    }

    pub fn require(&self, t: usize) -> Result<&Snapshot> {
        self.at(t).ok_or_else(|| {
            Error::Config(format!(
                "log covers t in [{:?}, {:?}], step {t} requested",
                self.first_t(),
                self.last_t()
            ))
        })
    }

    /// Keeps only `t ≤ t_end`.
    pub fn truncated(&self, t_end: usize) -> Self {
        Self {
            steps: self.steps.iter().filter(|s| s.t <= t_end).cloned().collect(),
        }
    }

    /// State from which a simulation can be resumed at time `t`.
    pub fn state_at(&self, t: usize) -> Result<InitialState> {
        let s = self.require(t)?;
        Ok(InitialState {
            v: s.v.clone(),
            x: s.x.clone(),
            observer: s.observer.clone(),
        })
    }

    /// `max_i ‖e_i(t)‖∞` per step.
    pub fn max_error_series(&self) -> Vec<(usize, f64)> {
        self.steps
            .iter()
            .map(|s| {
                let m = s.error.iter().map(|e| e.amax()).fold(0.0, f64::max);
                (s.t, m)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.steps.first() else {
            return out;
        };
        let mut header = vec!["t".to_string()];
        for j in 0..first.v.len() {
            header.push(format!("v{}", j + 1));
        }
        for i in 0..first.x.len() {
            let a = i + 1;
            header.extend((0..first.x[i].len()).map(|j| format!("agent{a}.x{}", j + 1)));
            header.extend((0..first.u[i].len()).map(|j| format!("agent{a}.u{}", j + 1)));
            header.extend((0..first.observer.zeta[i].len()).map(|j| format!("agent{a}.zeta{}", j + 1)));
            header.extend((0..first.error[i].len()).map(|j| format!("agent{a}.e{}", j + 1)));
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for s in &self.steps {
            let mut row = vec![s.t.to_string()];
            row.extend(s.v.iter().map(|v| fmt_f64(*v)));
            for i in 0..s.x.len() {
                row.extend(s.x[i].iter().map(|v| fmt_f64(*v)));
                row.extend(s.u[i].iter().map(|v| fmt_f64(*v)));
                row.extend(s.observer.zeta[i].iter().map(|v| fmt_f64(*v)));
                row.extend(s.error[i].iter().map(|v| fmt_f64(*v)));
            }
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Float formatting shared by every CSV writer: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn control(mas: &MasModel, policy: &Policy, i: usize, t: usize, x: &Vector, zeta: &Vector) -> (Vector, Vector) {
    let m = mas.followers[i].m();
    match policy {
        Policy::Behavior { k, noise } => {
            let n = noise[i].vector(t, m);
            (-(&k[i] * x) + &n, n)
        }
        Policy::Tracking { k, t: ff } => (-(&k[i] * x) + &ff[i] * zeta, Vector::zeros(m)),
    }
}

fn check_policy(mas: &MasModel, policy: &Policy) -> Result<()> {
    let n_agents = mas.n_agents();
    let (gains, extra) = match policy {
        Policy::Behavior { k, noise } => (k, noise.len()),
        Policy::Tracking { k, t } => {
            for (i, ti) in t.iter().enumerate() {
                let f = &mas.followers[i.min(n_agents - 1)];
                if ti.shape() != (f.m(), mas.leader.nv()) {
                    return Err(Error::Dimension(format!("agent {}: T has wrong shape", i + 1)));
                }
            }
            (k, t.len())
        }
    };
    if gains.len() != n_agents || extra != n_agents {
        return Err(Error::Dimension(format!(
            "policy covers {} agents, model has {n_agents}",
            gains.len()
        )));
    }
    for (i, (k, f)) in gains.iter().zip(&mas.followers).enumerate() {
        if k.shape() != (f.m(), f.n()) {
            return Err(Error::Dimension(format!("agent {}: K has wrong shape", i + 1)));
        }
    }
    Ok(())
}

/// Runs the network from `init` at time `t_start` and records steps
/// `t_start..=t_start + steps`.
pub fn simulate(
    mas: &MasModel,
    policy: &Policy,
    init: &InitialState,
    t_start: usize,
    steps: usize,
    guard: f64,
) -> Result<TrajectoryLog> {
    check_policy(mas, policy)?;
    if init.x.len() != mas.n_agents() {
        return Err(Error::Dimension("initial state count differs from agent count".into()));
    }
    let mut v = init.v.clone();
    let mut x = init.x.clone();
    let mut obs = init.observer.clone();
    let mut log = TrajectoryLog {
        steps: Vec::with_capacity(steps + 1),
    };
    for t in t_start..=t_start + steps {
        let mut us = Vec::with_capacity(x.len());
        let mut ns = Vec::with_capacity(x.len());
        let mut es = Vec::with_capacity(x.len());
        for (i, f) in mas.followers.iter().enumerate() {
            let (u, n) = control(mas, policy, i, t, &x[i], &obs.zeta[i]);
            es.push(f.tracking_error(&mas.leader.f, &x[i], &u, &v));
            us.push(u);
            ns.push(n);
        }
        let norm = x.iter().chain(obs.zeta.iter()).map(|s| s.norm()).fold(0.0, f64::max);
        if !norm.is_finite() || norm > guard {
            return Err(Error::Divergence { t, norm });
        }
        let next_x = mas
            .followers
            .iter()
            .zip(x.iter().zip(&us))
            .map(|(f, (xi, ui))| f.step(xi, ui).map(|(xn, _)| xn))
            .collect::<Result<Vec<_>>>()?;
        let next_obs = observer_step(&mas.topology, &mas.leader, &v, &obs);
        let (next_v, _) = mas.leader.step(&v);
        log.steps.push(Snapshot {
            t,
            v: v.clone(),
            x: x.clone(),
            u: us,
            noise: ns,
            error: es,
            observer: obs.clone(),
        });
        x = next_x;
        obs = next_obs;
        v = next_v;
    }
    Ok(log)
}

/// Behavior-policy run `u_i = −K̃⁰_i x_i + n_i(t)` recorded on `[0, t_end + 1]`.
pub fn simulate_behavior(
    mas: &MasModel,
    init: &InitialState,
    k0: &[Mat],
    noise: &[NoiseSpec],
    t_end: usize,
) -> Result<TrajectoryLog> {
    let policy = Policy::Behavior {
        k: k0.to_vec(),
        noise: noise.to_vec(),
    };
    simulate(mas, &policy, init, 0, t_end + 1, DIVERGENCE_GUARD)
}

/// Deploys `u_i = −K_i x_i + T_i ζ_i` from `init` at time `t_start`.
///
/// Refuses gains that do not make `A_i − B_i K_i` Schur.
pub fn simulate_closed_loop(
    mas: &MasModel,
    init: &InitialState,
    t_start: usize,
    k: &[Mat],
    t: &[Mat],
    horizon: usize,
) -> Result<TrajectoryLog> {
    for (i, (ki, f)) in k.iter().zip(&mas.followers).enumerate() {
        if ki.shape() != (f.m(), f.n()) {
            return Err(Error::Dimension(format!("agent {}: K has wrong shape", i + 1)));
        }
        let rho = spectral_radius(&(&f.a - &f.b * ki))?;
        if rho >= 1.0 {
            return Err(Error::NotStabilizing { rho }.in_stage("closed-loop deployment", i + 1));
        }
    }
    let policy = Policy::Tracking {
        k: k.to_vec(),
        t: t.to_vec(),
    };
    simulate(mas, &policy, init, t_start, horizon, DIVERGENCE_GUARD)
}

/// `‖x_i − X_i v‖` for each agent at one snapshot.
pub fn regulation_gap(snapshot: &Snapshot, x_reg: &[Mat]) -> Vec<f64> {
    snapshot
        .x
        .iter()
        .zip(x_reg)
        .map(|(x, xr)| (x - xr * &snapshot.v).norm())
        .collect()
}

pub fn max_state_norm(log: &TrajectoryLog) -> f64 {
    log.steps
        .iter()
        .flat_map(|s| s.x.iter().map(|x| x.norm()))
        .fold(0.0, f64::max)
}
