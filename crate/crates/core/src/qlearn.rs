//! Stabilizing policy iteration through a learned Q-function matrix `H`.
//!
//! Uses only `Z = [x; u]` pairs plus the reduced `ζ`-slices of the
//! off-policy bundle for the regulator, so it needs a shorter window.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matkit::{
    full_rank_least_squares, is_positive_definite, norm2, rank_with_tol, tri_len, unvec, unvecs, vecs, vecv, Mat,
    Vector,
};
use crate::offpolicy::{
    build_regression_bundle, minimal_horizon, AgentSpec, LearnSettings, RankCheck, RegressionBundle,
};
use crate::oracle::{alpha_bound, drive_stabilizing, gain_from_h, p_from_h, q_bar, q_r, search_beta, StabOutcome};
use crate::plant::{fmt_f64, TrajectoryLog};
use crate::regulator::{
    assemble_data_driven, build_basis, feedforward_gain, solve_regulator, ChiRun, RegulatorBasis, RegulatorSettings,
};

pub const Q_CONDITION: &str = "Q-function excitation (monomials of [x; u])";
pub const REGULATOR_DATA_CONDITION: &str = "regulator data excitation (ζ ⊗ x̃, ζ ⊗ u, vecv ζ)";

/// `H` split into its blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunctionMatrix {
    pub h: Mat,
    pub n: usize,
}

impl QFunctionMatrix {
    pub fn new(h: Mat, n: usize) -> Result<Self> {
        if !h.is_square() || h.nrows() <= n {
            return Err(Error::Dimension(format!(
                "H is {}x{}, state dimension {n}",
                h.nrows(),
                h.ncols()
            )));
        }
        Ok(Self { h, n })
    }

    fn m(&self) -> usize {
        self.h.nrows() - self.n
    }

    pub fn h11(&self) -> Mat {
        self.h.view((0, 0), (self.n, self.n)).into_owned()
    }

    pub fn h12(&self) -> Mat {
        self.h.view((0, self.n), (self.n, self.m())).into_owned()
    }

    pub fn h22(&self) -> Mat {
        self.h.view((self.n, self.n), (self.m(), self.m())).into_owned()
    }
}

/// `Γ_Z` and the raw samples needed to rebuild `Γ_z` for any gain.
#[derive(Debug, Clone, PartialEq)]
pub struct QRegression {
    pub t0: usize,
    pub t_f: usize,
    pub n: usize,
    pub m: usize,
    /// `x(t)` for `t = t₀..=t_f`.
    pub x: Vec<Vector>,
    /// `u(t)` for `t = t₀..t_f`.
    pub u: Vec<Vector>,
    /// Rows `vecv([x(t); u(t)])`.
    pub gamma_z: Mat,
}

impl QRegression {
    pub fn rows(&self) -> usize {
        self.u.len()
    }

    /// Rows `vecv([x(t+1); −K x(t+1)])`.
    pub fn gamma_next(&self, k: &Mat) -> Mat {
        let dim = self.n + self.m;
        let mut out = Mat::zeros(self.rows(), tri_len(dim));
        for r in 0..self.rows() {
            let x1 = &self.x[r + 1];
            let mut z = Vector::zeros(dim);
            z.rows_mut(0, self.n).copy_from(x1);
            z.rows_mut(self.n, self.m).copy_from(&(-(k * x1)));
            out.row_mut(r).copy_from(&vecv(&z).transpose());
        }
        out
    }
}

pub fn build_q_regression(log: &TrajectoryLog, agent: usize, t0: usize, t_f: usize) -> Result<QRegression> {
    if t_f <= t0 {
        return Err(Error::Config(format!(
            "data window needs t_f > t₀ (t₀ = {t0}, t_f = {t_f})"
        )));
    }
    let mut x = Vec::with_capacity(t_f - t0 + 1);
    let mut u = Vec::with_capacity(t_f - t0);
    for t in t0..=t_f {
        let s = log.require(t)?;
        if agent >= s.x.len() {
            return Err(Error::Dimension(format!("log has no agent {}", agent + 1)));
        }
        x.push(s.x[agent].clone());
        if t < t_f {
            u.push(s.u[agent].clone());
        }
    }
    let (n, m) = (x[0].len(), u[0].len());
    let mut gamma_z = Mat::zeros(u.len(), tri_len(n + m));
    for (r, (xr, ur)) in x.iter().zip(&u).enumerate() {
        let mut z = Vector::zeros(n + m);
        z.rows_mut(0, n).copy_from(xr);
        z.rows_mut(n, m).copy_from(ur);
        gamma_z.row_mut(r).copy_from(&vecv(&z).transpose());
    }
    Ok(QRegression {
        t0,
        t_f,
        n,
        m,
        x,
        u,
        gamma_z,
    })
}

pub fn check_q_rank(qreg: &QRegression, tol: f64) -> RankCheck {
    RankCheck {
        required: tri_len(qreg.n + qreg.m),
        achieved: rank_with_tol(&qreg.gamma_z, tol),
    }
}

/// `[ζ ⊗ x̃, ζ ⊗ u, vecv ζ]` on the unshifted slice.
pub fn regulator_data_matrix(bundle: &RegressionBundle, l: usize) -> Mat {
    let sh = &bundle.shifts[l];
    let (a, b, c) = (sh.gamma_zx.ncols(), bundle.gamma_zu.ncols(), bundle.gamma_zeta.ncols());
    let mut out = Mat::zeros(bundle.rows(), a + b + c);
    out.columns_mut(0, a).copy_from(&sh.gamma_zx);
    out.columns_mut(a, b).copy_from(&bundle.gamma_zu);
    out.columns_mut(a + b, c).copy_from(&bundle.gamma_zeta);
    out
}

pub fn check_regulator_data_rank(bundle: &RegressionBundle, tol: f64) -> RankCheck {
    let phi = regulator_data_matrix(bundle, 0);
    RankCheck {
        required: phi.ncols(),
        achieved: rank_with_tol(&phi, tol),
    }
}

/// `Ξ = Γ_Z − γ²Γ_z`, `φ = Γ_Z vecs(Q_R)`; returns the symmetric `H̃`.
pub fn solve_h_stab(qreg: &QRegression, k: &Mat, gamma: f64, q: &Mat, r: &Mat, tol: f64) -> Result<Mat> {
    if k.shape() != (qreg.m, qreg.n) {
        return Err(Error::Dimension(format!(
            "gain is {}x{}, expected {}x{}",
            k.nrows(),
            k.ncols(),
            qreg.m,
            qreg.n
        )));
    }
    let xi = &qreg.gamma_z - qreg.gamma_next(k) * (gamma * gamma);
    let phi = &qreg.gamma_z * vecs(&q_r(q, r))?;
    let sol = full_rank_least_squares(&xi, &phi, tol, Q_CONDITION)?;
    let h = unvecs(&sol, qreg.n + qreg.m)?;
    let asym = (&h - h.transpose()).amax();
    if asym > 1e-6 {
        log::warn!("H estimate asymmetric by {asym:e}; regression poorly conditioned");
    }
    Ok(h)
}

/// `K = H₂₂⁻¹H₂₁`.
pub fn update_gain_from_h(h: &Mat, n: usize) -> Result<Mat> {
    gain_from_h(h, n)
}

pub fn determine_beta0_q(qreg: &QRegression, k0: &Mat, spec: &AgentSpec, settings: &LearnSettings) -> Result<f64> {
    search_beta(&settings.beta_sequence, settings.alpha0, |gamma| {
        let h = solve_h_stab(qreg, k0, gamma, &spec.q, &spec.r, settings.rank_tol)?;
        Ok(is_positive_definite(&h, 0.0))
    })
}

/// Monotonicity bound on `P̃ᵏ = [I, −K̃ᵏᵀ]H̃ᵏ[I; −K̃ᵏ]`.
pub fn scheme_a_alpha_bound(h: &Mat, k: &Mat, q_bar_next: &Mat, gamma: f64, alpha_max: f64) -> f64 {
    alpha_bound(&p_from_h(h, k), q_bar_next, gamma, alpha_max)
}

/// Pseudo-solution `Ĥ` for the new gain at the old `γᵏ`, bounded against `Q_R`.
pub fn scheme_b_alpha_bound(
    qreg: &QRegression,
    k_next: &Mat,
    gamma: f64,
    spec: &AgentSpec,
    settings: &LearnSettings,
) -> Result<f64> {
    let pseudo = solve_h_stab(qreg, k_next, gamma, &spec.q, &spec.r, settings.rank_tol)?;
    Ok(alpha_bound(&pseudo, &q_r(&spec.q, &spec.r), gamma, settings.alpha_max))
}

/// Monotonicity bound on the current `H̃ᵏ` against `Q_R`.
pub fn scheme_c_alpha_bound(h: &Mat, q_r_mat: &Mat, gamma: f64, alpha_max: f64) -> f64 {
    alpha_bound(h, q_r_mat, gamma, alpha_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QScheme {
    A,
    B,
    C,
}

/// `H̃ᵏ` with the `P̃ᵏ` it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct QValue {
    pub h: Mat,
    pub p: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QBounds {
    pub k: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone)]
pub struct QStabilizingRun {
    pub beta: f64,
    pub outcome: StabOutcome<QValue>,
    pub bounds: Vec<QBounds>,
}

impl QStabilizingRun {
    pub fn gains(&self) -> Vec<Mat> {
        let mut out: Vec<Mat> = self.outcome.steps.iter().map(|s| s.gain.clone()).collect();
        out.push(self.outcome.gain.clone());
        out
    }
}

pub fn stabilizing_phase_q(
    qreg: &QRegression,
    k0: &Mat,
    scheme: QScheme,
    spec: &AgentSpec,
    settings: &LearnSettings,
) -> Result<QStabilizingRun> {
    let beta = determine_beta0_q(qreg, k0, spec, settings)?;
    let qr = q_r(&spec.q, &spec.r);
    let mut bounds = Vec::new();
    let mut step = 0;
    let evaluate = |k: &Mat, gamma: f64| -> Result<(QValue, Mat)> {
        let h = solve_h_stab(qreg, k, gamma, &spec.q, &spec.r, settings.rank_tol)?;
        let next = update_gain_from_h(&h, qreg.n)?;
        let p = p_from_h(&h, k);
        Ok((QValue { h, p }, next))
    };
    let bound = |val: &QValue, k: &Mat, next: &Mat, gamma: f64| -> Result<f64> {
        let qn = q_bar(&spec.q, &spec.r, next);
        let a = scheme_a_alpha_bound(&val.h, k, &qn, gamma, settings.alpha_max);
        let b = scheme_b_alpha_bound(qreg, next, gamma, spec, settings)?;
        let c = scheme_c_alpha_bound(&val.h, &qr, gamma, settings.alpha_max);
        bounds.push(QBounds { k: step, a, b, c });
        step += 1;
        Ok(match scheme {
            QScheme::A => a,
            QScheme::B => b,
            QScheme::C => c,
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
    Ok(QStabilizingRun { beta, outcome, bounds })
}

#[derive(Debug, Clone)]
pub struct QOptStep {
    pub j: usize,
    pub gain: Mat,
    pub h: Mat,
    pub p: Mat,
    pub next_gain: Mat,
}

#[derive(Debug, Clone)]
pub struct QOptimalRun {
    pub h: Mat,
    pub p: Mat,
    /// `K^j`, the gain `H^j` evaluates.
    pub gain: Mat,
    /// `K^{j+1}`.
    pub k: Mat,
    pub final_index: usize,
    pub steps: Vec<QOptStep>,
}

/// `γ = 1` iteration stopping at `‖H^j − H^{j−1}‖ ≤ ε₁`.
pub fn optimal_phase_q(
    qreg: &QRegression,
    k0: &Mat,
    spec: &AgentSpec,
    settings: &LearnSettings,
) -> Result<QOptimalRun> {
    let mut k = k0.clone();
    let mut steps: Vec<QOptStep> = Vec::new();
    let mut change = f64::INFINITY;
    for j in 0..settings.max_opt_iter {
        let h = solve_h_stab(qreg, &k, 1.0, &spec.q, &spec.r, settings.rank_tol)?;
        if !is_positive_definite(&h, 0.0) {
            return Err(Error::NotStabilizing { rho: f64::NAN });
        }
        let next = update_gain_from_h(&h, qreg.n)?;
        let p = p_from_h(&h, &k);
        let done = match steps.last() {
            Some(prev) => {
                change = norm2(&(&h - &prev.h));
                change <= settings.eps1
            }
            None => false,
        };
        steps.push(QOptStep {
            j,
            gain: k.clone(),
            h: h.clone(),
            p: p.clone(),
            next_gain: next.clone(),
        });
        if done {
            return Ok(QOptimalRun {
                h,
                p,
                gain: k,
                k: next,
                final_index: j,
                steps,
            });
        }
        k = next;
    }
    Err(Error::NonConvergence {
        what: "optimal-phase Q-learning",
        iters: settings.max_opt_iter,
        residual: change,
    })
}

/// `L₃ₗ, L₄ₗ, L₅ₗ` from the `ζ`-slices, with `L₁ → H₁₂` and `L₂ → H₂₂ − R`.
#[allow(clippy::too_many_arguments)]
pub fn solve_regulator_ls(
    bundle: &RegressionBundle,
    l: usize,
    h: &Mat,
    k: &Mat,
    p: &Mat,
    spec: &AgentSpec,
    tol: f64,
) -> Result<(Mat, Mat, Mat)> {
    let (n, m, nv) = (bundle.n, bundle.m, bundle.nv);
    let qh = QFunctionMatrix::new(h.clone(), n)?;
    let h12 = qh.h12();
    let l2 = qh.h22() - &spec.r;
    let qb = q_bar(&spec.q, &spec.r, k);
    let pv = vecs(p)?;
    let sh = bundle
        .shifts
        .get(l)
        .ok_or_else(|| Error::Dimension(format!("shift {l} not in bundle")))?;
    let mut phi = regulator_data_matrix(bundle, l);
    phi.columns_mut(0, n * nv + m * nv).scale_mut(2.0);
    let mut y = Vector::zeros(bundle.rows());
    for t in 0..bundle.rows() {
        let x = &sh.xt[t];
        let u = &bundle.u[t];
        let kx = k * x;
        let w = u + &kx;
        y[t] = sh.theta.row(t).transpose().dot(&pv) + (x.transpose() * &qb * x)[0]
            - 2.0 * (x.transpose() * &h12 * &w)[0]
            - (u.transpose() * &l2 * u)[0]
            + (kx.transpose() * &l2 * &kx)[0];
    }
    let sol = full_rank_least_squares(&phi, &y, tol, REGULATOR_DATA_CONDITION)?;
    let l3 = unvec(&sol.rows(0, n * nv).into_owned(), n, nv)?;
    let l4 = unvec(&sol.rows(n * nv, m * nv).into_owned(), m, nv)?;
    let l5 = unvecs(&sol.rows(n * nv + m * nv, tri_len(nv)).into_owned(), nv)?;
    Ok((l3, l4, l5))
}

/// `j,P_err,K_err,H_err` against reference values.
pub fn opt_history_q_csv(steps: &[QOptStep], p_star: &Mat, k_star: &Mat, h_star: &Mat) -> String {
    let mut out = String::from("j,P_err,K_err,H_err\n");
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.j,
            fmt_f64(norm2(&(&s.p - p_star))),
            fmt_f64(norm2(&(&s.gain - k_star))),
            fmt_f64(norm2(&(&s.h - h_star)))
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct Algorithm2Agent {
    pub t_f: usize,
    pub rank_q: RankCheck,
    pub rank_regulator: RankCheck,
    pub basis: RegulatorBasis,
    pub stab: QStabilizingRun,
    pub opt: QOptimalRun,
    pub regulator: ChiRun,
    pub k: Mat,
    pub x: Mat,
    pub u: Mat,
    pub t: Mat,
}

fn window_ok(qreg: &QRegression, bundle: &RegressionBundle, tol: f64) -> (RankCheck, RankCheck) {
    (check_q_rank(qreg, tol), check_regulator_data_rank(bundle, tol))
}

/// Full Q-learning pipeline for one agent on `[t₀, t_f]`.
#[allow(clippy::too_many_arguments)]
pub fn run_algorithm2(
    log: &TrajectoryLog,
    spec: &AgentSpec,
    k0: &Mat,
    t0: usize,
    t_f: Option<usize>,
    scheme: QScheme,
    settings: &LearnSettings,
    reg: &RegulatorSettings,
) -> Result<Algorithm2Agent> {
    let agent = spec.index + 1;
    let stage = |what: &'static str| move |e: Error| e.in_stage(what, agent);
    let f_obs = log.require(t0)?.observer.f[spec.index].clone();
    let basis = build_basis(&spec.c_bar, spec.n, &f_obs, settings.rank_tol).map_err(stage("regulator basis"))?;
    let data = |t: usize| -> Result<(QRegression, RegressionBundle)> {
        Ok((
            build_q_regression(log, spec.index, t0, t)?,
            build_regression_bundle(log, spec.index, &basis, t0, t)?,
        ))
    };
    let last = log.last_t().unwrap_or(0);
    let t_f = match t_f {
        Some(t) => t,
        None => {
            let found = minimal_horizon(t0, last, |t| {
                let (q, b) = data(t)?;
                let (r1, r2) = window_ok(&q, &b, settings.rank_tol);
                Ok(r1.satisfied() && r2.satisfied())
            })
            .map_err(stage("data collection"))?;
            found.unwrap_or(last)
        }
    };
    let (qreg, bundle) = data(t_f).map_err(stage("data collection"))?;
    let (rank_q, rank_regulator) = window_ok(&qreg, &bundle, settings.rank_tol);
    for (rc, cond) in [(rank_q, Q_CONDITION), (rank_regulator, REGULATOR_DATA_CONDITION)] {
        if !rc.satisfied() {
            return Err(Error::RankCondition {
                condition: cond,
                required: rc.required,
                achieved: rc.achieved,
            }
            .in_stage("data collection", agent));
        }
    }
    let stab = stabilizing_phase_q(&qreg, k0, scheme, spec, settings).map_err(stage("stabilizing phase"))?;
    let opt = optimal_phase_q(&qreg, &stab.outcome.gain, spec, settings).map_err(stage("optimal phase"))?;
    let l3 = (1..=bundle.h())
        .map(|l| solve_regulator_ls(&bundle, l, &opt.h, &opt.gain, &opt.p, spec, settings.rank_tol).map(|s| s.0))
        .collect::<Result<Vec<_>>>()
        .map_err(stage("regulator data regression"))?;
    let h12 = QFunctionMatrix::new(opt.h.clone(), spec.n)?.h12();
    let problem = assemble_data_driven(&l3, &h12, &basis).map_err(stage("regulator assembly"))?;
    let regulator = solve_regulator(&problem, reg).map_err(stage("regulator iteration"))?;
    let k = opt.k.clone();
    let t = feedforward_gain(&regulator.u, &k, &regulator.x);
    Ok(Algorithm2Agent {
        t_f,
        rank_q,
        rank_regulator,
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
