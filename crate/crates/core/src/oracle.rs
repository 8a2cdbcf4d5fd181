//! Model-based reference solutions used to validate the model-free paths.

use nalgebra::{Complex, DMatrix};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matkit::{
    min_norm_least_squares, norm2, sigma_max, sigma_min, solve_square, spectral_radius, sym, unvec, vec, Mat, Vector,
    DEFAULT_RANK_TOL,
};
use crate::plant::FollowerModel;

/// Step cap used when a step-size bound degenerates (zero denominator).
pub const ALPHA_MAX: f64 = 10.0;

/// Denominators below this are treated as zero by the step-size bounds.
pub const BOUND_FLOOR: f64 = 1e-12;

/// Solves `P = Aclᵀ P Acl + Q` through the Kronecker linear system.
pub fn dlyap(acl: &Mat, q: &Mat) -> Result<Mat> {
    let n = acl.nrows();
    if !acl.is_square() || q.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "dlyap: Acl {}x{}, Q {}x{}",
            acl.nrows(),
            acl.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let rho = spectral_radius(acl)?;
    if rho >= 1.0 {
        return Err(Error::NoLyapunovSolution { rho });
    }
    let at = acl.transpose();
    let lhs = Mat::identity(n * n, n * n) - at.kronecker(&at);
    let rhs = Mat::from_column_slice(n * n, 1, vec(q).as_slice());
    let sol = solve_square(&lhs, &rhs)?;
    Ok(sym(&unvec(&sol.column(0).into_owned(), n, n)?))
}

/// `γ²(R + γ² BᵀPB)⁻¹ BᵀPA`; with `γ = 1` this is the classic improvement.
pub fn gain_update(a: &Mat, b: &Mat, r: &Mat, p: &Mat, gamma: f64) -> Result<Mat> {
    let g2 = gamma * gamma;
    let lhs = r + b.transpose() * p * b * g2;
    Ok(solve_square(&lhs, &(b.transpose() * p * a))? * g2)
}

/// `Q + KᵀRK`.
pub fn q_bar(q: &Mat, r: &Mat, k: &Mat) -> Mat {
    sym(&(q + k.transpose() * r * k))
}

/// Residual of the Riccati equation `AᵀPA − P − AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q = 0`.
pub fn are_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<f64> {
    let k = gain_update(a, b, r, p, 1.0)?;
    let res = a.transpose() * p * a - p - a.transpose() * p * b * &k + q;
    Ok(norm2(&res))
}

#[derive(Debug, Clone)]
pub struct PiResult {
    pub p: Mat,
    pub k: Mat,
    /// `(P^j, K^j)` for every evaluation, `K^0` first.
    pub history: Vec<(Mat, Mat)>,
}

/// Classic policy iteration from a stabilizing gain.
///
/// Stops at the first `j ≥ 1` with `‖P^j − P^{j−1}‖ ≤ eps` and returns
/// `(P^j, K^{j+1})`.
pub fn classic_pi(a: &Mat, b: &Mat, q: &Mat, r: &Mat, k0: &Mat, eps: f64, max_iter: usize) -> Result<PiResult> {
    let rho = spectral_radius(&(a - b * k0))?;
    if rho >= 1.0 {
        return Err(Error::NotStabilizing { rho });
    }
    let mut k = k0.clone();
    let mut history: Vec<(Mat, Mat)> = Vec::new();
    let mut last_change = f64::INFINITY;
    for _ in 0..max_iter {
        let p = dlyap(&(a - b * &k), &q_bar(q, r, &k))?;
        let next = gain_update(a, b, r, &p, 1.0)?;
        let done = match history.last() {
            Some((prev, _)) => {
                last_change = norm2(&(&p - prev));
                last_change <= eps
            }
            None => false,
        };
        history.push((p.clone(), k.clone()));
        if done {
            return Ok(PiResult { p, k: next, history });
        }
        k = next;
    }
    Err(Error::NonConvergence {
        what: "policy iteration",
        iters: max_iter,
        residual: last_change,
    })
}

/// Running sum `γᵏ = β̃ + Σ_{m≤k} αᵐ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientLedger {
    pub beta: f64,
    pub alphas: Vec<f64>,
}

impl CoefficientLedger {
    pub fn new(beta: f64, alpha0: f64) -> Self {
        Self {
            beta,
            alphas: vec![alpha0],
        }
    }

    pub fn gamma(&self) -> f64 {
        self.beta + self.alphas.iter().sum::<f64>()
    }

    /// `γᵏ` for an already recorded `k`.
    pub fn gamma_at(&self, k: usize) -> f64 {
        self.beta + self.alphas[..=k].iter().sum::<f64>()
    }

    pub fn push(&mut self, alpha: f64) {
        self.alphas.push(alpha);
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

/// `γ (√(σ_min(W) / σ_max(V − W) + 1) − 1)`, the common shape of every
/// data-free step-size bound; capped at `alpha_max` when `V − W` vanishes.
pub fn alpha_bound(v: &Mat, w: &Mat, gamma: f64, alpha_max: f64) -> f64 {
    let denom = sigma_max(&(v - w));
    if denom <= BOUND_FLOOR {
        return alpha_max;
    }
    let bar = gamma * ((sigma_min(w) / denom + 1.0).sqrt() - 1.0);
    bar.min(alpha_max)
}

/// One recorded stabilizing-phase iterate.
#[derive(Debug, Clone)]
pub struct StabStep<T> {
    pub k: usize,
    pub gamma: f64,
    /// `K̃ᵏ`, the gain evaluated at this step.
    pub gain: Mat,
    /// Evaluation of `K̃ᵏ` at `γᵏ` (a `P̃ᵏ`, or an `(H̃ᵏ, P̃ᵏ)` pair).
    pub value: T,
    /// `K̃ᵏ⁺¹` produced from the evaluation.
    pub next_gain: Mat,
    /// Upper bound `ᾱᵏ⁺¹` and chosen `αᵏ⁺¹`; absent on the last step.
    pub alpha_bar: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StabOutcome<T> {
    pub gain: Mat,
    /// Index of the returned gain, i.e. it is `K̃^{final_index}`.
    pub final_index: usize,
    pub ledger: CoefficientLedger,
    pub steps: Vec<StabStep<T>>,
}

/// Shared stabilizing-phase loop.
///
/// Each pass evaluates `K̃ᵏ` at `γᵏ` and forms `K̃ᵏ⁺¹`. Once `γᵏ ≥ λ̄` the
/// freshly improved `K̃ᵏ⁺¹` is returned: it stabilizes `γᵏ(A − BK̃ᵏ⁺¹)`, so
/// its spectral radius is below `1/λ̄`. Otherwise `αᵏ⁺¹ = a·ᾱ` is added.
#[allow(clippy::too_many_arguments)]
pub fn drive_stabilizing<T: Clone>(
    gain0: &Mat,
    beta: f64,
    alpha0: f64,
    a_coef: f64,
    lambda_bar: f64,
    max_iter: usize,
    mut evaluate: impl FnMut(&Mat, f64) -> Result<(T, Mat)>,
    mut bound: impl FnMut(&T, &Mat, &Mat, f64) -> Result<f64>,
) -> Result<StabOutcome<T>> {
    let mut ledger = CoefficientLedger::new(beta, alpha0);
    let mut gain = gain0.clone();
    let mut steps = Vec::new();
    for k in 0..max_iter {
        let gamma = ledger.gamma();
        let (value, next) = evaluate(&gain, gamma)?;
        if gamma >= lambda_bar {
            steps.push(StabStep {
                k,
                gamma,
                gain: gain.clone(),
                value,
                next_gain: next.clone(),
                alpha_bar: None,
                alpha: None,
            });
            return Ok(StabOutcome {
                gain: next,
                final_index: k + 1,
                ledger,
                steps,
            });
        }
        let bar = bound(&value, &gain, &next, gamma)?;
        let alpha = a_coef * bar;
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::StalledIteration { k, alpha });
        }
        steps.push(StabStep {
            k,
            gamma,
            gain: gain.clone(),
            value,
            next_gain: next.clone(),
            alpha_bar: Some(bar),
            alpha: Some(alpha),
        });
        ledger.push(alpha);
        gain = next;
    }
    Err(Error::NonConvergence {
        what: "stabilizing policy iteration",
        iters: max_iter,
        residual: ledger.gamma(),
    })
}

/// Walks a decreasing `β̃` sequence until `accept(β̃ + α⁰)` holds.
pub fn search_beta(sequence: &[f64], alpha0: f64, mut accept: impl FnMut(f64) -> Result<bool>) -> Result<f64> {
    for &beta in sequence {
        if accept(beta + alpha0)? {
            return Ok(beta);
        }
    }
    Err(Error::BetaSearchExhausted {
        last: sequence.last().copied().unwrap_or(f64::NAN),
    })
}

/// `{start, start − step, …}` down to (and including) `floor`.
pub fn beta_sequence(start: f64, step: f64, floor: f64) -> Vec<f64> {
    let count = ((start - floor) / step).round() as usize;
    (0..=count).map(|z| start - z as f64 * step).collect()
}

/// Model-based step-size rules for the stabilizing iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// `a·(1/ρ(A − BK̃ᵏ⁺¹) − γᵏ)`, the exact spectral interval.
    Spectral,
    /// Pseudo-solution bound (new gain evaluated at the old `γᵏ`).
    Pseudo,
    /// Monotonicity bound using the current `P̃ᵏ`.
    Monotone,
}

#[derive(Debug, Clone, Copy)]
pub struct StabSettings {
    pub alpha0: f64,
    pub a: f64,
    pub lambda_bar: f64,
    pub alpha_max: f64,
    pub max_iter: usize,
}

impl Default for StabSettings {
    fn default() -> Self {
        Self {
            alpha0: 1e-4,
            a: 0.5,
            lambda_bar: 1.0,
            alpha_max: ALPHA_MAX,
            max_iter: 10_000,
        }
    }
}

/// Model-based stabilizing policy iteration from an arbitrary gain.
#[allow(clippy::too_many_arguments)]
pub fn stabilizing_pi_model_based(
    a: &Mat,
    b: &Mat,
    q: &Mat,
    r: &Mat,
    k0: &Mat,
    beta: f64,
    rule: StepRule,
    settings: &StabSettings,
) -> Result<StabOutcome<Mat>> {
    let eval = |k: &Mat, gamma: f64| -> Result<(Mat, Mat)> {
        let p = dlyap(&((a - b * k) * gamma), &q_bar(q, r, k))?;
        let next = gain_update(a, b, r, &p, gamma)?;
        Ok((p, next))
    };
    let bound = |p: &Mat, _k: &Mat, next: &Mat, gamma: f64| -> Result<f64> {
        let qn = q_bar(q, r, next);
        Ok(match rule {
            StepRule::Spectral => {
                let rho = spectral_radius(&(a - b * next))?;
                if rho <= BOUND_FLOOR {
                    settings.alpha_max
                } else {
                    (1.0 / rho - gamma).min(settings.alpha_max)
                }
            }
            StepRule::Pseudo => {
                let ph = dlyap(&((a - b * next) * gamma), &qn)?;
                alpha_bound(&ph, &qn, gamma, settings.alpha_max)
            }
            StepRule::Monotone => alpha_bound(p, &qn, gamma, settings.alpha_max),
        })
    };
    drive_stabilizing(
        k0,
        beta,
        settings.alpha0,
        settings.a,
        settings.lambda_bar,
        settings.max_iter,
        eval,
        bound,
    )
}

/// Largest `β̃` from `sequence` with `ρ((β̃ + α⁰)(A − BK̃⁰)) < 1`.
pub fn beta_by_spectrum(a: &Mat, b: &Mat, k0: &Mat, sequence: &[f64], alpha0: f64) -> Result<f64> {
    let rho = spectral_radius(&(a - b * k0))?;
    search_beta(sequence, alpha0, |g| Ok(g * rho < 1.0))
}

#[derive(Debug, Clone)]
pub struct AreSolution {
    pub p: Mat,
    pub k: Mat,
}

/// Stabilizing DARE solution via the oracle chain: stabilizing PI from
/// `K = 0`, then classic PI converged to `1e−12`.
pub fn dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<AreSolution> {
    let k0 = Mat::zeros(b.ncols(), a.nrows());
    let rho = spectral_radius(a)?;
    let start = if rho < 1.0 {
        k0
    } else {
        let beta = 0.5 / rho;
        let settings = StabSettings {
            alpha0: 0.0,
            ..Default::default()
        };
        stabilizing_pi_model_based(a, b, q, r, &k0, beta, StepRule::Spectral, &settings)?.gain
    };
    let res = classic_pi(a, b, q, r, &start, 1e-12, 10_000)?;
    let p = res.history.last().map(|(p, _)| p.clone()).unwrap_or(res.p);
    let k = gain_update(a, b, r, &p, 1.0)?;
    Ok(AreSolution { p, k })
}

/// `H` with blocks `γ²AᵀPA + Q`, `γ²AᵀPB`, `γ²BᵀPB + R`.
pub fn h_from_p(p: &Mat, a: &Mat, b: &Mat, q: &Mat, r: &Mat, gamma: f64) -> Mat {
    let (n, m) = (a.nrows(), b.ncols());
    let g2 = gamma * gamma;
    let mut h = Mat::zeros(n + m, n + m);
    let h11 = a.transpose() * p * a * g2 + q;
    let h12 = a.transpose() * p * b * g2;
    let h22 = b.transpose() * p * b * g2 + r;
    h.view_mut((0, 0), (n, n)).copy_from(&h11);
    h.view_mut((0, n), (n, m)).copy_from(&h12);
    h.view_mut((n, 0), (m, n)).copy_from(&h12.transpose());
    h.view_mut((n, n), (m, m)).copy_from(&h22);
    sym(&h)
}

/// `[I, −Kᵀ] H [I; −K]`.
pub fn p_from_h(h: &Mat, k: &Mat) -> Mat {
    let n = k.ncols();
    let m = k.nrows();
    let mut t = Mat::zeros(n + m, n);
    t.view_mut((0, 0), (n, n)).copy_from(&Mat::identity(n, n));
    t.view_mut((n, 0), (m, n)).copy_from(&(-k));
    sym(&(t.transpose() * h * t))
}

/// `H₂₂⁻¹ H₂₁` for an `(n + m)`-square `H`.
pub fn gain_from_h(h: &Mat, n: usize) -> Result<Mat> {
    let m = h.nrows() - n;
    let h22 = h.view((n, n), (m, m)).into_owned();
    let h21 = h.view((n, 0), (m, n)).into_owned();
    solve_square(&h22, &h21)
        .map_err(|_| Error::Numerical("H22 block is singular; invalid Q-function evaluation".into()))
}

/// `blockdiag(Q, R)`.
pub fn q_r(q: &Mat, r: &Mat) -> Mat {
    let (n, m) = (q.nrows(), r.nrows());
    let mut out = Mat::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(q);
    out.view_mut((n, n), (m, m)).copy_from(r);
    out
}

/// Numerical check of `rank [A − λI, B; C, S] = n + n_y` for every `λ ∈ σ(E)`.
pub fn check_transmission_condition(f: &FollowerModel, e: &Mat) -> Result<()> {
    let (n, m, ny) = (f.n(), f.m(), f.ny());
    let lambdas = e.complex_eigenvalues();
    for lam in lambdas.iter() {
        let mut mat = DMatrix::<Complex<f64>>::zeros(n + ny, n + m);
        for i in 0..n {
            for j in 0..n {
                let d = if i == j { *lam } else { Complex::new(0.0, 0.0) };
                mat[(i, j)] = Complex::new(f.a[(i, j)], 0.0) - d;
            }
            for j in 0..m {
                mat[(i, n + j)] = Complex::new(f.b[(i, j)], 0.0);
            }
        }
        for i in 0..ny {
            for j in 0..n {
                mat[(n + i, j)] = Complex::new(f.c[(i, j)], 0.0);
            }
            for j in 0..m {
                mat[(n + i, n + j)] = Complex::new(f.s[(i, j)], 0.0);
            }
        }
        let sv = mat.svd(false, false).singular_values;
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let rank = sv.iter().filter(|&&s| s > 1e-10 * smax.max(1.0)).count();
        if rank < n + ny {
            return Err(Error::RegulatorUnsolvable {
                lambda: format!("{:.6}{:+.6}i", lam.re, lam.im),
            });
        }
    }
    Ok(())
}

/// Minimum-norm solution of `AX + BU = XE`, `CX + SU + F = 0`.
pub fn regulator_direct_solve(f: &FollowerModel, e: &Mat, ff: &Mat) -> Result<(Mat, Mat)> {
    check_transmission_condition(f, e)?;
    let (n, m, ny, nv) = (f.n(), f.m(), f.ny(), e.nrows());
    let inv = Mat::identity(nv, nv);
    let mut lhs = Mat::zeros(n * nv + ny * nv, n * nv + m * nv);
    let top_x = inv.kronecker(&f.a) - e.transpose().kronecker(&Mat::identity(n, n));
    lhs.view_mut((0, 0), (n * nv, n * nv)).copy_from(&top_x);
    lhs.view_mut((0, n * nv), (n * nv, m * nv))
        .copy_from(&inv.kronecker(&f.b));
    lhs.view_mut((n * nv, 0), (ny * nv, n * nv))
        .copy_from(&inv.kronecker(&f.c));
    lhs.view_mut((n * nv, n * nv), (ny * nv, m * nv))
        .copy_from(&inv.kronecker(&f.s));
    let mut rhs = Vector::zeros(n * nv + ny * nv);
    rhs.rows_mut(n * nv, ny * nv).copy_from(&(-vec(ff)));
    let sol = min_norm_least_squares(&lhs, &rhs, DEFAULT_RANK_TOL)?;
    let x = unvec(&sol.x.rows(0, n * nv).into_owned(), n, nv)?;
    let u = unvec(&sol.x.rows(n * nv, m * nv).into_owned(), m, nv)?;
    Ok((x, u))
}

/// `‖AX + BU − XE‖ + ‖CX + SU + F‖` in the spectral norm.
pub fn regulator_residual(f: &FollowerModel, e: &Mat, ff: &Mat, x: &Mat, u: &Mat) -> f64 {
    norm2(&(&f.a * x + &f.b * u - x * e)) + norm2(&(&f.c * x + &f.s * u + ff))
}

/// Everything the oracle knows about one agent.
#[derive(Debug, Clone)]
pub struct AgentOracle {
    pub p: Mat,
    pub k: Mat,
    pub h: Mat,
    pub x: Mat,
    pub u: Mat,
    pub t: Mat,
}

pub fn agent_oracle(f: &FollowerModel, e: &Mat, ff: &Mat, q: &Mat, r: &Mat) -> Result<AgentOracle> {
    let are = dare(&f.a, &f.b, q, r)?;
    let h = h_from_p(&are.p, &f.a, &f.b, q, r, 1.0);
    let (x, u) = regulator_direct_solve(f, e, ff)?;
    let t = &u + &are.k * &x;
    Ok(AgentOracle {
        p: are.p,
        k: are.k,
        h,
        x,
        u,
        t,
    })
}
