//! Off-policy stabilizing policy iteration from one behavior log.
//!
//! Only logged `x_i`, `u_i`, `ζ_i` and the observer's `F_i` enter the
//! regressions; `A_i` and `B_i` are never read.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matkit::{
    full_rank_least_squares, is_positive_definite, kron_vec, norm2, rank_with_tol, spectral_radius, sym, tri_len,
    unvec, unvecs, vecs, vecv, Mat, Vector, DEFAULT_RANK_TOL,
};
use crate::oracle::{alpha_bound, beta_sequence, drive_stabilizing, q_bar, search_beta, StabOutcome, ALPHA_MAX};
use crate::plant::{fmt_f64, FollowerModel, TrajectoryLog};
use crate::regulator::{
    assemble_data_driven, build_basis, feedforward_gain, solve_regulator, ChiRun, RegulatorBasis, RegulatorSettings,
};

/// Name reported when the off-policy regression is rank deficient.
pub const OFFPOLICY_CONDITION: &str = "off-policy excitation (monomials of [x̃; u; ζ])";

/// What a learner may know about one follower: dimensions, output map and
/// cost weights. The dynamics stay hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    /// Zero-based index into the log.
    pub index: usize,
    pub n: usize,
    pub m: usize,
    pub c_bar: Mat,
    pub q: Mat,
    pub r: Mat,
}

impl AgentSpec {
    pub fn new(index: usize, f: &FollowerModel, q: Mat, r: Mat) -> Result<Self> {
        if q.shape() != (f.n(), f.n()) || r.shape() != (f.m(), f.m()) {
            return Err(Error::Dimension(format!("agent {}: Q or R has wrong shape", index + 1)));
        }
        Ok(Self {
            index,
            n: f.n(),
            m: f.m(),
            c_bar: f.c_bar(),
            q,
            r,
        })
    }
}

/// Learning constants shared by both algorithms.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnSettings {
    pub alpha0: f64,
    pub beta_sequence: Vec<f64>,
    /// Fraction of the step-size bound actually taken.
    pub a: f64,
    pub lambda_bar: f64,
    pub alpha_max: f64,
    pub eps1: f64,
    pub max_stab_iter: usize,
    pub max_opt_iter: usize,
    pub rank_tol: f64,
}

impl Default for LearnSettings {
    fn default() -> Self {
        Self {
            alpha0: 1e-4,
            beta_sequence: beta_sequence(0.5, 0.01, 0.01),
            a: 0.5,
            lambda_bar: 1.0,
            alpha_max: ALPHA_MAX,
            eps1: 1e-4,
            max_stab_iter: 10_000,
            max_opt_iter: 100,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

/// Regression data for one shift `x̃ₗ = x − X_l ζ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedData {
    /// `x̃ₗ(t)` for `t = t₀..=t_f`.
    pub xt: Vec<Vector>,
    /// Rows `vecv(x̃(t+1)) − vecv(x̃(t))`.
    pub theta: Mat,
    /// Rows `vecv(x̃(t))`.
    pub gamma_x: Mat,
    /// Rows `x̃(t) ⊗ x̃(t)`.
    pub gamma_xx: Mat,
    /// Rows `u(t) ⊗ x̃(t)`.
    pub gamma_ux: Mat,
    /// Rows `ζ(t) ⊗ x̃(t)`.
    pub gamma_zx: Mat,
}

/// Data matrices collected on `[t₀, t_f]` for every shift `l = 0..=h`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBundle {
    pub t0: usize,
    pub t_f: usize,
    pub n: usize,
    pub m: usize,
    pub nv: usize,
    /// `u(t)` and `ζ(t)` for `t = t₀..t_f`.
    pub u: Vec<Vector>,
    pub zeta: Vec<Vector>,
    pub gamma_u: Mat,
    pub gamma_zeta: Mat,
    pub gamma_zu: Mat,
    pub shifts: Vec<ShiftedData>,
}

fn stack_rows(rows: &[Vector], cols: usize) -> Mat {
    let mut out = Mat::zeros(rows.len(), cols);
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from(&r.transpose());
    }
    out
}

impl RegressionBundle {
    /// Number of regression rows, `t_f − t₀`.
    pub fn rows(&self) -> usize {
        self.u.len()
    }

    /// Number of samples, `t_f − t₀ + 1`.
    pub fn samples(&self) -> usize {
        self.rows() + 1
    }

    pub fn h(&self) -> usize {
        self.shifts.len() - 1
    }

    /// Column count of the off-policy regression.
    pub fn unknowns(&self) -> usize {
        let (n, m, nv) = (self.n, self.m, self.nv);
        tri_len(n) + n * m + tri_len(m) + n * nv + m * nv + tri_len(nv)
    }
}

pub fn build_regression_bundle(
    log: &TrajectoryLog,
    agent: usize,
    basis: &RegulatorBasis,
    t0: usize,
    t_f: usize,
) -> Result<RegressionBundle> {
    if t_f <= t0 {
        return Err(Error::Config(format!(
            "data window needs t_f > t₀ (t₀ = {t0}, t_f = {t_f})"
        )));
    }
    let (n, m, nv) = (basis.n, basis.m, basis.nv);
    let mut xs = Vec::with_capacity(t_f - t0 + 1);
    let mut zs = Vec::with_capacity(t_f - t0 + 1);
    let mut us = Vec::with_capacity(t_f - t0);
    for t in t0..=t_f {
        let s = log.require(t)?;
        if agent >= s.x.len() {
            return Err(Error::Dimension(format!("log has no agent {}", agent + 1)));
        }
        if s.x[agent].len() != n || s.u[agent].len() != m || s.v.len() != nv {
            return Err(Error::Dimension(format!(
                "agent {}: log dimensions differ from basis",
                agent + 1
            )));
        }
        xs.push(s.x[agent].clone());
        zs.push(s.observer.zeta[agent].clone());
        if t < t_f {
            us.push(s.u[agent].clone());
        }
    }
    let rows = us.len();
    let zeta: Vec<Vector> = zs[..rows].to_vec();
    let gamma_u = stack_rows(&us.iter().map(vecv).collect::<Vec<_>>(), tri_len(m));
    let gamma_zeta = stack_rows(&zeta.iter().map(vecv).collect::<Vec<_>>(), tri_len(nv));
    let gamma_zu = stack_rows(
        &zeta.iter().zip(&us).map(|(z, u)| kron_vec(z, u)).collect::<Vec<_>>(),
        nv * m,
    );
    let shifts = basis
        .pairs
        .iter()
        .map(|(xl, _)| {
            let xt: Vec<Vector> = xs.iter().zip(&zs).map(|(x, z)| x - xl * z).collect();
            let theta: Vec<Vector> = (0..rows).map(|r| vecv(&xt[r + 1]) - vecv(&xt[r])).collect();
            ShiftedData {
                theta: stack_rows(&theta, tri_len(n)),
                gamma_x: stack_rows(&xt[..rows].iter().map(vecv).collect::<Vec<_>>(), tri_len(n)),
                gamma_xx: stack_rows(&xt[..rows].iter().map(|x| kron_vec(x, x)).collect::<Vec<_>>(), n * n),
                gamma_ux: stack_rows(
                    &xt[..rows]
                        .iter()
                        .zip(&us)
                        .map(|(x, u)| kron_vec(u, x))
                        .collect::<Vec<_>>(),
                    m * n,
                ),
                gamma_zx: stack_rows(
                    &xt[..rows]
                        .iter()
                        .zip(&zeta)
                        .map(|(x, z)| kron_vec(z, x))
                        .collect::<Vec<_>>(),
                    nv * n,
                ),
                xt,
            }
        })
        .collect();
    Ok(RegressionBundle {
        t0,
        t_f,
        n,
        m,
        nv,
        u: us,
        zeta,
        gamma_u,
        gamma_zeta,
        gamma_zu,
        shifts,
    })
}

/// Outcome of a rank test on stacked data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RankCheck {
    pub required: usize,
    pub achieved: usize,
}

impl RankCheck {
    pub fn satisfied(&self) -> bool {
        self.achieved >= self.required
    }
}

/// Rank of the quadratic monomials of `[x̃₀; u; ζ]` over the window; the
/// off-policy regression is uniquely solvable when it reaches
/// `(n+m+n_v)(n+m+n_v+1)/2`.
pub fn check_offpolicy_rank(bundle: &RegressionBundle, tol: f64) -> RankCheck {
    let dim = bundle.n + bundle.m + bundle.nv;
    let rows: Vec<Vector> = (0..bundle.rows())
        .map(|r| {
            let mut z = Vector::zeros(dim);
            z.rows_mut(0, bundle.n).copy_from(&bundle.shifts[0].xt[r]);
            z.rows_mut(bundle.n, bundle.m).copy_from(&bundle.u[r]);
            z.rows_mut(bundle.n + bundle.m, bundle.nv).copy_from(&bundle.zeta[r]);
            vecv(&z)
        })
        .collect();
    RankCheck {
        required: tri_len(dim),
        achieved: rank_with_tol(&stack_rows(&rows, tri_len(dim)), tol),
    }
}

/// Smallest `t_f ∈ (t₀, t_max]` for which `ok(t_f)` holds.
pub fn minimal_horizon(t0: usize, t_max: usize, mut ok: impl FnMut(usize) -> Result<bool>) -> Result<Option<usize>> {
    for t_f in t0 + 1..=t_max {
        if ok(t_f)? {
            return Ok(Some(t_f));
        }
    }
    Ok(None)
}

/// `P̃` and `L₁…L₅` from one regression solve.
#[derive(Debug, Clone, PartialEq)]
pub struct StabRegression {
    pub p: Mat,
    /// `AᵀPB`, `n × m`.
    pub l1: Mat,
    /// `BᵀPB`.
    pub l2: Mat,
    /// `AᵀPπₗ`, `n × n_v`.
    pub l3: Mat,
    /// `BᵀPπₗ`, `m × n_v`.
    pub l4: Mat,
    /// `πₗᵀPπₗ`.
    pub l5: Mat,
}

/// Regressor and right-hand side for shift `l`, gain `K` and scale `γ`.
pub fn stab_regressor(
    bundle: &RegressionBundle,
    l: usize,
    k: &Mat,
    gamma: f64,
    q: &Mat,
    r: &Mat,
) -> Result<(Mat, Vector)> {
    let (n, m, nv) = (bundle.n, bundle.m, bundle.nv);
    if k.shape() != (m, n) {
        return Err(Error::Dimension(format!(
            "gain is {}x{}, expected {m}x{n}",
            k.nrows(),
            k.ncols()
        )));
    }
    let sh = bundle
        .shifts
        .get(l)
        .ok_or_else(|| Error::Dimension(format!("shift {l} not in bundle")))?;
    let g2inv = 1.0 / (gamma * gamma);
    let qv = vecs(&q_bar(q, r, k))?;
    let cols = bundle.unknowns();
    let rows = bundle.rows();
    let mut phi = Mat::zeros(rows, cols);
    let mut y = Vector::zeros(rows);
    let (c1, c2, c3, c4, c5) = (
        tri_len(n),
        tri_len(n) + n * m,
        tri_len(n) + n * m + tri_len(m),
        tri_len(n) + n * m + tri_len(m) + n * nv,
        tri_len(n) + n * m + tri_len(m) + n * nv + m * nv,
    );
    for t in 0..rows {
        let x = &sh.xt[t];
        let kx = k * x;
        let mut row = phi.row_mut(t);
        let th = sh.theta.row(t) - sh.gamma_x.row(t) * (g2inv - 1.0);
        row.columns_mut(0, c1).copy_from(&th);
        let wx = sh.gamma_ux.row(t) + kron_vec(&kx, x).transpose();
        row.columns_mut(c1, n * m).copy_from(&(wx * -2.0));
        row.columns_mut(c2, tri_len(m))
            .copy_from(&(vecv(&kx).transpose() - bundle.gamma_u.row(t)));
        row.columns_mut(c3, n * nv).copy_from(&(sh.gamma_zx.row(t) * -2.0));
        row.columns_mut(c4, m * nv).copy_from(&(bundle.gamma_zu.row(t) * -2.0));
        row.columns_mut(c5, tri_len(nv)).copy_from(&(-bundle.gamma_zeta.row(t)));
        y[t] = -g2inv * sh.gamma_x.row(t).transpose().dot(&qv);
    }
    Ok((phi, y))
}

pub fn solve_stab_regression(
    bundle: &RegressionBundle,
    l: usize,
    k: &Mat,
    gamma: f64,
    q: &Mat,
    r: &Mat,
    tol: f64,
) -> Result<StabRegression> {
    let (n, m, nv) = (bundle.n, bundle.m, bundle.nv);
    let (phi, y) = stab_regressor(bundle, l, k, gamma, q, r)?;
    let sol = full_rank_least_squares(&phi, &y, tol, OFFPOLICY_CONDITION)?;
    let mut at = 0;
    let mut take = |len: usize| {
        let v = sol.rows(at, len).into_owned();
        at += len;
        v
    };
    let p = unvecs(&take(tri_len(n)), n)?;
    let l1 = unvec(&take(n * m), n, m)?;
    let l2 = unvecs(&take(tri_len(m)), m)?;
    let l3 = unvec(&take(n * nv), n, nv)?;
    let l4 = unvec(&take(m * nv), m, nv)?;
    let l5 = unvecs(&take(tri_len(nv)), nv)?;
    Ok(StabRegression { p, l1, l2, l3, l4, l5 })
}

/// `K̃ = γ²(R + γ²L₂)⁻¹L₁ᵀ`.
pub fn update_gain_stab(l1: &Mat, l2: &Mat, gamma: f64, r: &Mat) -> Result<Mat> {
    let g2 = gamma * gamma;
    let lhs = sym(&(r + l2 * g2));
    Ok(crate::matkit::solve_square(&lhs, &l1.transpose())? * g2)
}

/// Walks the `β̃` sequence until the regression at `β̃ + α⁰` returns `P̃⁰ ≻ 0`.
pub fn determine_beta0(bundle: &RegressionBundle, k0: &Mat, spec: &AgentSpec, settings: &LearnSettings) -> Result<f64> {
    search_beta(&settings.beta_sequence, settings.alpha0, |gamma| {
        let reg = solve_stab_regression(bundle, 0, k0, gamma, &spec.q, &spec.r, settings.rank_tol)?;
        Ok(is_positive_definite(&reg.p, 0.0))
    })
}

/// Pseudo-solution bound: the new gain is evaluated at the old `γᵏ`.
pub fn scheme1_alpha_bound(
    bundle: &RegressionBundle,
    k_next: &Mat,
    gamma: f64,
    spec: &AgentSpec,
    settings: &LearnSettings,
) -> Result<f64> {
    let pseudo = solve_stab_regression(bundle, 0, k_next, gamma, &spec.q, &spec.r, settings.rank_tol)?;
    let qn = q_bar(&spec.q, &spec.r, k_next);
    Ok(alpha_bound(&pseudo.p, &qn, gamma, settings.alpha_max))
}

/// Monotonicity bound from the current `P̃ᵏ`.
pub fn scheme2_alpha_bound(p: &Mat, q_bar_next: &Mat, gamma: f64, alpha_max: f64) -> f64 {
    alpha_bound(p, q_bar_next, gamma, alpha_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OffPolicyScheme {
    /// Pseudo-solution bound.
    One,
    /// Monotonicity bound.
    Two,
}

/// Both candidate bounds at one stabilizing step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundPair {
    pub k: usize,
    pub pseudo: f64,
    pub monotone: f64,
}

#[derive(Debug, Clone)]
pub struct StabilizingRun {
    pub beta: f64,
    pub outcome: StabOutcome<StabRegression>,
    pub bounds: Vec<BoundPair>,
}

impl StabilizingRun {
    /// `K̃⁰, K̃¹, …, K̃^final`.
    pub fn gains(&self) -> Vec<Mat> {
        let mut out: Vec<Mat> = self.outcome.steps.iter().map(|s| s.gain.clone()).collect();
        out.push(self.outcome.gain.clone());
        out
    }
}

/// Stabilizing phase: grows `γ` from `β̃ + α⁰` to `λ̄` starting at `K̃⁰`.
pub fn stabilizing_phase(
    bundle: &RegressionBundle,
    k0: &Mat,
    scheme: OffPolicyScheme,
    spec: &AgentSpec,
    settings: &LearnSettings,
) -> Result<StabilizingRun> {
    let beta = determine_beta0(bundle, k0, spec, settings)?;
    let mut bounds = Vec::new();
    let mut step = 0;
    let evaluate = |k: &Mat, gamma: f64| -> Result<(StabRegression, Mat)> {
        let reg = solve_stab_regression(bundle, 0, k, gamma, &spec.q, &spec.r, settings.rank_tol)?;
        let next = update_gain_stab(&reg.l1, &reg.l2, gamma, &spec.r)?;
        Ok((reg, next))
    };
    let bound = |reg: &StabRegression, _k: &Mat, next: &Mat, gamma: f64| -> Result<f64> {
        let qn = q_bar(&spec.q, &spec.r, next);
        let pseudo = scheme1_alpha_bound(bundle, next, gamma, spec, settings)?;
        let monotone = scheme2_alpha_bound(&reg.p, &qn, gamma, settings.alpha_max);
        bounds.push(BoundPair {
            k: step,
            pseudo,
            monotone,
        });
        step += 1;
        Ok(match scheme {
            OffPolicyScheme::One => pseudo,
            OffPolicyScheme::Two => monotone,
        })
    };
    let outcome = drive_stabilizing(
        k0,
        beta,
        settings.alpha0,
        settings.a,
        settings.lambda_bar,
        settings.max_stab_iter,
        evaluate,
        bound,
    )?;
    Ok(StabilizingRun { beta, outcome, bounds })
}

/// One optimal-phase iterate: `P^j` evaluates `K^j`, `K^{j+1}` improves it.
#[derive(Debug, Clone)]
pub struct OptStep {
    pub j: usize,
    pub gain: Mat,
    pub value: StabRegression,
    pub next_gain: Mat,
}

#[derive(Debug, Clone)]
pub struct OptimalRun {
    /// `P^j` at the stopping index.
    pub p: Mat,
    /// `K^{j+1}`.
    pub k: Mat,
    pub final_index: usize,
    /// `L₁` at the stopping index.
    pub l1: Mat,
    /// `L₃ₗ` for `l = 1..=h` at the stopping index.
    pub l3: Vec<Mat>,
    pub steps: Vec<OptStep>,
}

/// Classic policy iteration from `K⁰` with `γ = 1`, stopping at
/// `‖P^j − P^{j−1}‖ ≤ ε₁`.
pub fn optimal_phase(
    bundle: &RegressionBundle,
    k0: &Mat,
    spec: &AgentSpec,
    settings: &LearnSettings,
) -> Result<OptimalRun> {
    let mut k = k0.clone();
    let mut steps: Vec<OptStep> = Vec::new();
    let mut change = f64::INFINITY;
    for j in 0..settings.max_opt_iter {
        let reg = solve_stab_regression(bundle, 0, &k, 1.0, &spec.q, &spec.r, settings.rank_tol)?;
        if !is_positive_definite(&reg.p, 0.0) {
            return Err(Error::NotStabilizing { rho: f64::NAN });
        }
        let next = update_gain_stab(&reg.l1, &reg.l2, 1.0, &spec.r)?;
        let done = match steps.last() {
            Some(prev) => {
                change = norm2(&(&reg.p - &prev.value.p));
                change <= settings.eps1
            }
            None => false,
        };
        steps.push(OptStep {
            j,
            gain: k.clone(),
            value: reg.clone(),
            next_gain: next.clone(),
        });
        if done {
            let l3 = (1..=bundle.h())
                .map(|l| solve_stab_regression(bundle, l, &k, 1.0, &spec.q, &spec.r, settings.rank_tol).map(|s| s.l3))
                .collect::<Result<Vec<_>>>()?;
            return Ok(OptimalRun {
                p: reg.p,
                k: next,
                final_index: j,
                l1: reg.l1,
                l3,
                steps,
            });
        }
        k = next;
    }
    Err(Error::NonConvergence {
        what: "optimal-phase policy iteration",
        iters: settings.max_opt_iter,
        residual: change,
    })
}

fn gain_header(out: &mut String, k: &Mat) {
    for r in 0..k.nrows() {
        for c in 0..k.ncols() {
            let _ = write!(out, ",K{}{}", r + 1, c + 1);
        }
    }
}

fn gain_cells(out: &mut String, k: &Mat) {
    for r in 0..k.nrows() {
        for c in 0..k.ncols() {
            let _ = write!(out, ",{}", fmt_f64(k[(r, c)]));
        }
    }
}

/// `k,gamma,alpha,rho_oracle,K..` for the stabilizing iterates; `rho_oracle`
/// is `ρ(A − BK̃ᵏ)` when a model is supplied and empty otherwise.
pub fn stab_history_csv<T>(outcome: &StabOutcome<T>, model: Option<&FollowerModel>) -> String {
    let mut out = String::from("k,gamma,alpha,rho_oracle");
    gain_header(&mut out, &outcome.gain);
    out.push('\n');
    let rho = |k: &Mat| -> String {
        model
            .and_then(|f| spectral_radius(&(&f.a - &f.b * k)).ok())
            .map(fmt_f64)
            .unwrap_or_default()
    };
    for s in &outcome.steps {
        let alpha = s.alpha.map(fmt_f64).unwrap_or_default();
        let _ = write!(out, "{},{},{},{}", s.k, fmt_f64(s.gamma), alpha, rho(&s.gain));
        gain_cells(&mut out, &s.gain);
        out.push('\n');
    }
    let _ = write!(out, "{},,,{}", outcome.final_index, rho(&outcome.gain));
    gain_cells(&mut out, &outcome.gain);
    out.push('\n');
    out
}

/// `j,P_err,K_err` against reference `P*`, `K*`.
pub fn opt_history_csv(steps: &[(usize, Mat, Mat)], p_star: &Mat, k_star: &Mat) -> String {
    let mut out = String::from("j,P_err,K_err\n");
    for (j, p, k) in steps {
        let _ = writeln!(
            out,
            "{j},{},{}",
            fmt_f64(norm2(&(p - p_star))),
            fmt_f64(norm2(&(k - k_star)))
        );
    }
    out
}

/// Everything Algorithm 1 produces for one agent.
#[derive(Debug, Clone)]
pub struct Algorithm1Agent {
    pub t_f: usize,
    pub rank: RankCheck,
    pub basis: RegulatorBasis,
    pub stab: StabilizingRun,
    pub opt: OptimalRun,
    pub regulator: ChiRun,
    pub k: Mat,
    pub x: Mat,
    pub u: Mat,
    pub t: Mat,
}

/// Full off-policy pipeline for one agent on `[t₀, t_f]`.
///
/// With `t_f = None` the smallest window meeting the rank condition is used.
#[allow(clippy::too_many_arguments)]
pub fn run_algorithm1(
    log: &TrajectoryLog,
    spec: &AgentSpec,
    k0: &Mat,
    t0: usize,
    t_f: Option<usize>,
    scheme: OffPolicyScheme,
    settings: &LearnSettings,
    reg: &RegulatorSettings,
) -> Result<Algorithm1Agent> {
    let agent = spec.index + 1;
    let snap = log.require(t0)?;
    let f_obs = snap.observer.f[spec.index].clone();
    let basis = build_basis(&spec.c_bar, spec.n, &f_obs, settings.rank_tol)
        .map_err(|e| e.in_stage("regulator basis", agent))?;
    let last = log.last_t().unwrap_or(0);
    let t_f = match t_f {
        Some(t) => t,
        None => {
            let found = minimal_horizon(t0, last, |t| {
                let b = build_regression_bundle(log, spec.index, &basis, t0, t)?;
                Ok(check_offpolicy_rank(&b, settings.rank_tol).satisfied())
            })
            .map_err(|e| e.in_stage("data collection", agent))?;
            match found {
                Some(t) => t,
                None => {
                    let b = build_regression_bundle(log, spec.index, &basis, t0, last)
                        .map_err(|e| e.in_stage("data collection", agent))?;
                    let rc = check_offpolicy_rank(&b, settings.rank_tol);
                    return Err(Error::RankCondition {
                        condition: OFFPOLICY_CONDITION,
                        required: rc.required,
                        achieved: rc.achieved,
                    }
                    .in_stage("data collection", agent));
                }
            }
        }
    };
    let bundle =
        build_regression_bundle(log, spec.index, &basis, t0, t_f).map_err(|e| e.in_stage("data collection", agent))?;
    let rank = check_offpolicy_rank(&bundle, settings.rank_tol);
    if !rank.satisfied() {
        return Err(Error::RankCondition {
            condition: OFFPOLICY_CONDITION,
            required: rank.required,
            achieved: rank.achieved,
        }
        .in_stage("data collection", agent));
    }
    let stab =
        stabilizing_phase(&bundle, k0, scheme, spec, settings).map_err(|e| e.in_stage("stabilizing phase", agent))?;
    let opt =
        optimal_phase(&bundle, &stab.outcome.gain, spec, settings).map_err(|e| e.in_stage("optimal phase", agent))?;
    let problem =
        assemble_data_driven(&opt.l3, &opt.l1, &basis).map_err(|e| e.in_stage("regulator assembly", agent))?;
    let regulator = solve_regulator(&problem, reg).map_err(|e| e.in_stage("regulator iteration", agent))?;
    let k = opt.k.clone();
    let t = feedforward_gain(&regulator.u, &k, &regulator.x);
    Ok(Algorithm1Agent {
        t_f,
        rank,
        basis,
        stab,
        x: regulator.x.clone(),
        u: regulator.u.clone(),
        opt,
        regulator,
        k,
        t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matkit::{from_rows, min_eigenvalue};
    use crate::oracle::{dare, dlyap, gain_update, regulator_residual};
    use crate::regulator::pi_l;
    use crate::testutil;
    use approx::assert_abs_diff_eq;

    fn spec(i: usize) -> AgentSpec {
        AgentSpec::new(i, &testutil::follower(i + 1), Mat::identity(2, 2), Mat::identity(1, 1)).unwrap()
    }

    fn bundle_for(i: usize, t_f: usize) -> RegressionBundle {
        let mas = testutil::mas();
        let log = testutil::behavior_log(&mas, 220);
        let f_obs = log.at(85).unwrap().observer.f[i].clone();
        let basis = build_basis(&spec(i).c_bar, 2, &f_obs, DEFAULT_RANK_TOL).unwrap();
        build_regression_bundle(&log, i, &basis, 85, t_f).unwrap()
    }

    #[test]
    fn bundle_shapes_and_zero_shift() {
        let b = bundle_for(0, 100);
        assert_eq!(b.rows(), 15);
        assert_eq!(b.samples(), 16);
        assert_eq!(b.unknowns(), 15);
        assert_eq!(b.h(), 5);
        assert_eq!(b.shifts[0].theta.nrows(), b.gamma_zu.nrows());
        let mas = testutil::mas();
        let log = testutil::behavior_log(&mas, 120);
        for (r, x) in b.shifts[0].xt.iter().enumerate() {
            assert_eq!(x, &log.at(85 + r).unwrap().x[0]);
        }
    }

    #[test]
    fn zero_log_gives_zero_bundle() {
        let mas = testutil::mas();
        let init = crate::plant::InitialState::cold(&mas, Vector::zeros(2), vec![Vector::zeros(2); 4]);
        let log = crate::plant::simulate_behavior(
            &mas,
            &init,
            &vec![Mat::zeros(1, 2); 4],
            &vec![crate::plant::NoiseSpec::zero(); 4],
            30,
        )
        .unwrap();
        let basis = build_basis(&spec(0).c_bar, 2, &Mat::zeros(1, 2), DEFAULT_RANK_TOL).unwrap();
        let b = build_regression_bundle(&log, 0, &basis, 5, 25).unwrap();
        for sh in &b.shifts {
            assert_eq!(sh.theta.amax() + sh.gamma_xx.amax() + sh.gamma_zx.amax(), 0.0);
        }
        assert_eq!(check_offpolicy_rank(&b, DEFAULT_RANK_TOL).achieved, 0);
    }

    #[test]
    fn theta_is_a_quadratic_difference() {
        let b = bundle_for(2, 100);
        let p = from_rows(&[vec![2.0, -0.3], vec![-0.3, 0.7]]).unwrap();
        let pv = vecs(&p).unwrap();
        for sh in &b.shifts {
            for r in 0..b.rows() {
                let lhs = sh.theta.row(r).transpose().dot(&pv);
                let (x0, x1) = (&sh.xt[r], &sh.xt[r + 1]);
                let rhs = (x1.transpose() * &p * x1)[0] - (x0.transpose() * &p * x0)[0];
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10 * (1.0 + rhs.abs()));
            }
        }
    }

    #[test]
    fn short_window_is_rejected() {
        let mas = testutil::mas();
        let log = testutil::behavior_log(&mas, 50);
        let basis = build_basis(&spec(0).c_bar, 2, &Mat::zeros(1, 2), DEFAULT_RANK_TOL).unwrap();
        assert!(build_regression_bundle(&log, 0, &basis, 40, 90).is_err());
        assert!(build_regression_bundle(&log, 0, &basis, 40, 40).is_err());
    }

    #[test]
    fn rank_threshold_is_one_hundred() {
        for i in 0..4 {
            let mas = testutil::mas();
            let log = testutil::behavior_log(&mas, 140);
            let basis = build_basis(&spec(i).c_bar, 2, &Mat::zeros(1, 2), DEFAULT_RANK_TOL).unwrap();
            let t_f = minimal_horizon(85, 130, |t| {
                let b = build_regression_bundle(&log, i, &basis, 85, t)?;
                Ok(check_offpolicy_rank(&b, DEFAULT_RANK_TOL).satisfied())
            })
            .unwrap();
            assert_eq!(t_f, Some(100));
        }
        assert_eq!(check_offpolicy_rank(&bundle_for(0, 100), DEFAULT_RANK_TOL).required, 15);
    }

    #[test]
    fn regression_matches_model_based_values() {
        for i in 0..4 {
            let f = testutil::follower(i + 1);
            let e = testutil::leader().e;
            let b = bundle_for(i, 100);
            let k = from_rows(&[vec![0.1, -0.2]]).unwrap();
            let gamma = 0.7;
            let reg = solve_stab_regression(&b, 0, &k, gamma, &spec(i).q, &spec(i).r, DEFAULT_RANK_TOL).unwrap();
            let p = dlyap(&((&f.a - &f.b * &k) * gamma), &q_bar(&spec(i).q, &spec(i).r, &k)).unwrap();
            assert_abs_diff_eq!((&reg.p - &p).amax(), 0.0, epsilon = 1e-8);
            assert_abs_diff_eq!((&reg.l1 - f.a.transpose() * &p * &f.b).amax(), 0.0, epsilon = 1e-8);
            assert_abs_diff_eq!((&reg.l2 - f.b.transpose() * &p * &f.b).amax(), 0.0, epsilon = 1e-8);
            assert!(reg.l2[(0, 0)] > 0.0);
            // shifted regressions share P, L1, L2 and add the π-dependent blocks
            let f_obs = testutil::behavior_log(&testutil::mas(), 120).at(85).unwrap().observer.f[i].clone();
            let basis = build_basis(&spec(i).c_bar, 2, &f_obs, DEFAULT_RANK_TOL).unwrap();
            for l in 1..=b.h() {
                let rl = solve_stab_regression(&b, l, &k, gamma, &spec(i).q, &spec(i).r, DEFAULT_RANK_TOL).unwrap();
                assert_abs_diff_eq!((&rl.p - &reg.p).amax(), 0.0, epsilon = 1e-6);
                assert_abs_diff_eq!((&rl.l1 - &reg.l1).amax(), 0.0, epsilon = 1e-6);
                let pi = pi_l(&f, &e, basis.x(l));
                assert_abs_diff_eq!((&rl.l3 - f.a.transpose() * &p * &pi).amax(), 0.0, epsilon = 1e-6);
                assert_abs_diff_eq!((&rl.l4 - f.b.transpose() * &p * &pi).amax(), 0.0, epsilon = 1e-6);
                assert_abs_diff_eq!((&rl.l5 - pi.transpose() * &p * &pi).amax(), 0.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn gain_update_cases() {
        let r = Mat::identity(1, 1);
        assert_eq!(
            update_gain_stab(&Mat::zeros(2, 1), &Mat::zeros(1, 1), 0.8, &r).unwrap(),
            Mat::zeros(1, 2)
        );
        let f = testutil::follower(1);
        let p = from_rows(&[vec![2.0, 0.3], vec![0.3, 1.5]]).unwrap();
        for gamma in [0.5, 1.0, 2.0] {
            let k = update_gain_stab(
                &(f.a.transpose() * &p * &f.b),
                &(f.b.transpose() * &p * &f.b),
                gamma,
                &r,
            )
            .unwrap();
            let want = gain_update(&f.a, &f.b, &r, &p, gamma).unwrap();
            assert_abs_diff_eq!((k - want).amax(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn beta_search_accepts_first_candidate_for_zero_gain() {
        let b = bundle_for(0, 100);
        let beta = determine_beta0(&b, &Mat::zeros(1, 2), &spec(0), &LearnSettings::default()).unwrap();
        assert_eq!(beta, 0.5);
        let f = testutil::follower(1);
        assert!((beta + 1e-4) * spectral_radius(&f.a).unwrap() < 1.0);
    }

    #[test]
    fn scheme_bounds() {
        let q = Mat::identity(2, 2);
        assert_eq!(scheme2_alpha_bound(&q, &q, 0.5, 7.0), 7.0);
        let b = bundle_for(0, 100);
        let run = stabilizing_phase(
            &b,
            &Mat::zeros(1, 2),
            OffPolicyScheme::Two,
            &spec(0),
            &LearnSettings::default(),
        )
        .unwrap();
        assert!(!run.bounds.is_empty());
        for bp in &run.bounds {
            assert!(bp.monotone > 0.0);
            assert!(bp.pseudo > bp.monotone);
        }
    }

    #[test]
    fn stabilizing_iterates_respect_spectral_bound() {
        for i in 0..4 {
            let f = testutil::follower(i + 1);
            let b = bundle_for(i, 100);
            for scheme in [OffPolicyScheme::One, OffPolicyScheme::Two] {
                let run =
                    stabilizing_phase(&b, &Mat::zeros(1, 2), scheme, &spec(i), &LearnSettings::default()).unwrap();
                for s in &run.outcome.steps {
                    assert!(s.gamma * spectral_radius(&(&f.a - &f.b * &s.gain)).unwrap() < 1.0);
                    let p = dlyap(
                        &((&f.a - &f.b * &s.gain) * s.gamma),
                        &q_bar(&spec(i).q, &spec(i).r, &s.gain),
                    )
                    .unwrap();
                    assert_abs_diff_eq!((&s.value.p - &p).amax(), 0.0, epsilon = 1e-6);
                }
                for w in run.outcome.steps.windows(2) {
                    assert!(w[1].gamma > w[0].gamma);
                }
                assert!(spectral_radius(&(&f.a - &f.b * &run.outcome.gain)).unwrap() < 1.0);
            }
        }
    }

    #[test]
    fn third_agent_reproduces_reference_gain() {
        let b = bundle_for(2, 100);
        let run = stabilizing_phase(
            &b,
            &Mat::zeros(1, 2),
            OffPolicyScheme::Two,
            &spec(2),
            &LearnSettings::default(),
        )
        .unwrap();
        assert_eq!(run.outcome.final_index, 5);
        let k = &run.outcome.gain;
        assert_abs_diff_eq!(k[(0, 0)], -0.2456, epsilon = 5e-4);
        assert_abs_diff_eq!(k[(0, 1)], 0.6164, epsilon = 5e-4);
    }

    #[test]
    fn optimal_phase_tracks_classic_pi() {
        for i in 0..4 {
            let f = testutil::follower(i + 1);
            let b = bundle_for(i, 100);
            let s = spec(i);
            let settings = LearnSettings::default();
            let stab = stabilizing_phase(&b, &Mat::zeros(1, 2), OffPolicyScheme::Two, &s, &settings).unwrap();
            let opt = optimal_phase(&b, &stab.outcome.gain, &s, &settings).unwrap();
            assert!(opt.final_index <= 3);
            let mut k = stab.outcome.gain.clone();
            for st in &opt.steps {
                let p = dlyap(&(&f.a - &f.b * &k), &q_bar(&s.q, &s.r, &k)).unwrap();
                let next = gain_update(&f.a, &f.b, &s.r, &p, 1.0).unwrap();
                assert_abs_diff_eq!((&st.next_gain - &next).amax(), 0.0, epsilon = 1e-5);
                k = next;
            }
            for w in opt.steps.windows(2) {
                assert!(min_eigenvalue(&(&w[0].value.p - &w[1].value.p)) >= -1e-8);
            }
            let star = dare(&f.a, &f.b, &s.q, &s.r).unwrap();
            assert!(norm2(&(&opt.p - &star.p)) < 1e-5);
            assert!(crate::oracle::are_residual(&f.a, &f.b, &s.q, &s.r, &opt.p).unwrap() < 1e-4);
            assert_eq!(opt.l3.len(), b.h());
        }
    }

    #[test]
    fn full_pipeline_solves_regulator() {
        let mas = testutil::mas();
        let log = testutil::behavior_log(&mas, 220);
        for i in 0..4 {
            let res = run_algorithm1(
                &log,
                &spec(i),
                &Mat::zeros(1, 2),
                85,
                None,
                OffPolicyScheme::Two,
                &LearnSettings::default(),
                &RegulatorSettings {
                    eps2: 1e-12,
                    max_iter: 10_000_000,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(res.t_f, 100);
            let f = &mas.followers[i];
            assert!(regulator_residual(f, &mas.leader.e, &mas.leader.f, &res.x, &res.u) < 1e-6);
            assert_eq!(res.t, &res.u + &res.k * &res.x);
        }
    }

    #[test]
    fn history_csv_layout() {
        let b = bundle_for(0, 100);
        let run = stabilizing_phase(
            &b,
            &Mat::zeros(1, 2),
            OffPolicyScheme::Two,
            &spec(0),
            &LearnSettings::default(),
        )
        .unwrap();
        let csv = stab_history_csv(&run.outcome, Some(&testutil::follower(1)));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "k,gamma,alpha,rho_oracle,K11,K12");
        assert_eq!(lines.len(), run.outcome.steps.len() + 2);
        let csv = opt_history_csv(
            &[(0, Mat::identity(2, 2), Mat::zeros(1, 2))],
            &Mat::identity(2, 2),
            &Mat::zeros(1, 2),
        );
        assert!(csv.ends_with("0,0.0000000000000000e0,0.0000000000000000e0\n"));
    }
}
