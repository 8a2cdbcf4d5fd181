//! Approximate regulator-equation solutions from an estimated `F` and a
//! kernel basis, refined by the gradient iteration on `Ωχ = η̂`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::matkit::{null_space_basis, rank_with_tol, sigma_max, solve_square, unvec, vec, Mat, Vector};
use crate::plant::{fmt_f64, FollowerModel};

/// `(X_l, U_l)` for `l = 0..=h`: index 0 is zero, index 1 the estimate from
/// the observed `F_i(t₀)`, indices `2..=h` span `ker(I ⊗ C̄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegulatorBasis {
    pub n: usize,
    pub m: usize,
    pub nv: usize,
    pub pairs: Vec<(Mat, Mat)>,
}

impl RegulatorBasis {
    /// `h`, the largest index.
    pub fn h(&self) -> usize {
        self.pairs.len() - 1
    }

    pub fn x(&self, l: usize) -> &Mat {
        &self.pairs[l].0
    }

    pub fn u(&self, l: usize) -> &Mat {
        &self.pairs[l].1
    }
}

fn stack_xu(x: &Mat, u: &Mat) -> Mat {
    let (n, m, nv) = (x.nrows(), u.nrows(), x.ncols());
    let mut w = Mat::zeros(n + m, nv);
    w.view_mut((0, 0), (n, nv)).copy_from(x);
    w.view_mut((n, 0), (m, nv)).copy_from(u);
    w
}

fn split_xu(w: &Mat, n: usize) -> (Mat, Mat) {
    let (rows, nv) = w.shape();
    (
        w.view((0, 0), (n, nv)).into_owned(),
        w.view((n, 0), (rows - n, nv)).into_owned(),
    )
}

pub fn build_basis(c_bar: &Mat, n: usize, f_obs: &Mat, tol: f64) -> Result<RegulatorBasis> {
    let (ny, nm) = c_bar.shape();
    if n >= nm {
        return Err(Error::Dimension(
            "C̄ must have more columns than the state dimension".into(),
        ));
    }
    let m = nm - n;
    let nv = f_obs.ncols();
    if f_obs.nrows() != ny {
        return Err(Error::Dimension(format!(
            "F estimate has {} rows, C̄ has {ny}",
            f_obs.nrows()
        )));
    }
    if rank_with_tol(c_bar, tol) < ny {
        return Err(Error::Assumption("[C, S] is not full row rank".into()));
    }
    let gram = c_bar * c_bar.transpose();
    let w1 = -(c_bar.transpose() * solve_square(&gram, f_obs)?);
    let (x1, u1) = split_xu(&w1, n);
    let mut pairs = vec![(Mat::zeros(n, nv), Mat::zeros(m, nv)), (x1, u1)];
    let big = Mat::identity(nv, nv).kronecker(c_bar);
    for w in null_space_basis(&big, tol) {
        let wm = unvec(&w, nm, nv)?;
        pairs.push(split_xu(&wm, n));
    }
    Ok(RegulatorBasis { n, m, nv, pairs })
}

/// `Ῡ(X, U) = XE − AX − BU`.
pub fn sylvester_bar(f: &FollowerModel, e: &Mat, x: &Mat, u: &Mat) -> Mat {
    x * e - &f.a * x - &f.b * u
}

/// `π_l = A X_l − X_l E`.
pub fn pi_l(f: &FollowerModel, e: &Mat, x: &Mat) -> Mat {
    &f.a * x - x * e
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegulatorProblem {
    pub omega: Mat,
    pub eta: Vector,
    pub n: usize,
    pub m: usize,
    pub nv: usize,
}

impl RegulatorProblem {
    /// Assembles `Ω` and `η̂` from `MῩ(X_l, U_l)` for `l = 1..=h`.
    fn from_images(basis: &RegulatorBasis, images: &[Mat]) -> Result<Self> {
        let (n, m, nv) = (basis.n, basis.m, basis.nv);
        let h = basis.h();
        if images.len() != h {
            return Err(Error::Dimension(format!(
                "regulator assembly: {} images for h = {h}",
                images.len()
            )));
        }
        let top = n * nv;
        let bottom = (n + m) * nv;
        let cols = (h - 1) + bottom;
        let mut omega = Mat::zeros(top + bottom, cols);
        for l in 2..=h {
            let c = l - 2;
            omega.view_mut((0, c), (top, 1)).copy_from(&vec(&images[l - 1]));
            omega
                .view_mut((top, c), (bottom, 1))
                .copy_from(&vec(&stack_xu(basis.x(l), basis.u(l))));
        }
        omega
            .view_mut((top, h - 1), (bottom, bottom))
            .copy_from(&(-Mat::identity(bottom, bottom)));
        let mut eta = Vector::zeros(top + bottom);
        eta.rows_mut(0, top).copy_from(&(-vec(&images[0])));
        eta.rows_mut(top, bottom)
            .copy_from(&(-vec(&stack_xu(basis.x(1), basis.u(1)))));
        Ok(Self { omega, eta, n, m, nv })
    }

    /// `(X, U)` block of a solution vector.
    pub fn extract(&self, chi: &Vector) -> Result<(Mat, Mat)> {
        let bottom = (self.n + self.m) * self.nv;
        let start = chi.len() - bottom;
        let w = unvec(&chi.rows(start, bottom).into_owned(), self.n + self.m, self.nv)?;
        Ok(split_xu(&w, self.n))
    }

    pub fn residual(&self, chi: &Vector) -> f64 {
        (&self.omega * chi - &self.eta).norm()
    }
}

/// Model-based assembly with an arbitrary weighting `M`.
pub fn assemble_model_based(
    m_weight: &Mat,
    f: &FollowerModel,
    e: &Mat,
    basis: &RegulatorBasis,
) -> Result<RegulatorProblem> {
    let images: Vec<Mat> = (1..=basis.h())
        .map(|l| m_weight * sylvester_bar(f, e, basis.x(l), basis.u(l)))
        .collect();
    RegulatorProblem::from_images(basis, &images)
}

/// Data-driven assembly with `MῩ(X_l, U_l) = −L₃ₗ − L₁U_l`.
///
/// `l3[l - 1]` holds `L₃ₗ`; `l1` is `L₁` (or `H₁₂` for the Q-learning path).
pub fn assemble_data_driven(l3: &[Mat], l1: &Mat, basis: &RegulatorBasis) -> Result<RegulatorProblem> {
    if l3.len() != basis.h() {
        return Err(Error::Dimension(format!(
            "expected {} L3 blocks, got {}",
            basis.h(),
            l3.len()
        )));
    }
    let images: Vec<Mat> = (1..=basis.h()).map(|l| -(&l3[l - 1]) - l1 * basis.u(l)).collect();
    RegulatorProblem::from_images(basis, &images)
}

/// `κ = c / ρ(ΩᵀΩ)`.
pub fn choose_kappa(omega: &Mat, c: f64) -> Result<f64> {
    let s = sigma_max(omega);
    if s == 0.0 {
        return Err(Error::Numerical(
            "Ω is zero; the regulator problem is degenerate".into(),
        ));
    }
    Ok(c / (s * s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiRecord {
    pub n: usize,
    pub residual: f64,
    pub chi_delta: f64,
}

#[derive(Debug, Clone)]
pub struct ChiRun {
    pub chi: Vector,
    pub x: Mat,
    pub u: Mat,
    pub iterations: usize,
    pub history: Vec<ChiRecord>,
}

impl ChiRun {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("n,residual,chi_delta\n");
        for r in &self.history {
            let _ = writeln!(out, "{},{},{}", r.n, fmt_f64(r.residual), fmt_f64(r.chi_delta));
        }
        out
    }
}

/// `χⁿ⁺¹ = χⁿ − κΩᵀ(Ωχⁿ − η̂)` from `χ⁰ = chi0` until `‖χⁿ⁺¹ − χⁿ‖ ≤ eps`.
pub fn iterate_chi(problem: &RegulatorProblem, kappa: f64, chi0: &Vector, eps: f64, max_iter: usize) -> Result<ChiRun> {
    let limit = 2.0 / sigma_max(&problem.omega).powi(2);
    if !(kappa > 0.0 && kappa < limit) {
        return Err(Error::Config(format!("κ = {kappa:e} outside (0, {limit:e})")));
    }
    let omega_t = problem.omega.transpose();
    let mut chi = chi0.clone();
    let mut history = Vec::new();
    let mut delta = f64::INFINITY;
    for n in 0..max_iter {
        let r = &problem.omega * &chi - &problem.eta;
        let step = &omega_t * &r * kappa;
        delta = step.norm();
        chi -= &step;
        history.push(ChiRecord {
            n: n + 1,
            residual: problem.residual(&chi),
            chi_delta: delta,
        });
        if delta <= eps {
            let (x, u) = problem.extract(&chi)?;
            return Ok(ChiRun {
                chi,
                x,
                u,
                iterations: n + 1,
                history,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "regulator iteration",
        iters: max_iter,
        residual: delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegulatorSettings {
    /// Stopping threshold on `‖χⁿ⁺¹ − χⁿ‖`.
    pub eps2: f64,
    /// `κ = c / ρ(ΩᵀΩ)`, `c ∈ (0, 2)`.
    pub c: f64,
    pub max_iter: usize,
}

impl Default for RegulatorSettings {
    fn default() -> Self {
        Self {
            eps2: 1e-4,
            c: 1.0,
            max_iter: 200_000,
        }
    }
}

/// `κ` selection plus the iteration from `χ⁰ = 0`.
pub fn solve_regulator(problem: &RegulatorProblem, settings: &RegulatorSettings) -> Result<ChiRun> {
    let kappa = choose_kappa(&problem.omega, settings.c)?;
    let chi0 = Vector::zeros(problem.omega.ncols());
    iterate_chi(problem, kappa, &chi0, settings.eps2, settings.max_iter)
}

/// `T = U + K X`.
pub fn feedforward_gain(u: &Mat, k: &Mat, x: &Mat) -> Mat {
    u + k * x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matkit::{from_rows, min_norm_least_squares, DEFAULT_RANK_TOL};
    use crate::oracle::{dare, regulator_direct_solve, regulator_residual};
    use approx::assert_abs_diff_eq;

    fn agent() -> FollowerModel {
        FollowerModel::new(
            from_rows(&[vec![0.0, 1.0], vec![-1.0, -0.2]]).unwrap(),
            from_rows(&[vec![0.0], vec![1.0]]).unwrap(),
            from_rows(&[vec![1.0, 0.0]]).unwrap(),
            Mat::identity(1, 1),
        )
        .unwrap()
    }

    fn rot() -> Mat {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        from_rows(&[vec![c, s], vec![-s, c]]).unwrap()
    }

    fn f_true() -> Mat {
        from_rows(&[vec![-1.0, 0.0]]).unwrap()
    }

    #[test]
    fn basis_properties() {
        let f = agent();
        let zero = build_basis(&f.c_bar(), 2, &Mat::zeros(1, 2), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(zero.h(), 5);
        assert_eq!(zero.x(1).amax() + zero.u(1).amax(), 0.0);

        let b = build_basis(&f.c_bar(), 2, &f_true(), DEFAULT_RANK_TOL).unwrap();
        let img = &f.c * b.x(1) + &f.s * b.u(1);
        assert_abs_diff_eq!((img + f_true()).amax(), 0.0, epsilon = 1e-14);
        for l in 2..=b.h() {
            let img = &f.c * b.x(l) + &f.s * b.u(l);
            assert!(img.amax() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_c_bar_is_rejected() {
        let cb = Mat::zeros(1, 3);
        assert!(matches!(
            build_basis(&cb, 2, &Mat::zeros(1, 2), DEFAULT_RANK_TOL),
            Err(Error::Assumption(_))
        ));
    }

    #[test]
    fn exact_solution_embeds() {
        let f = agent();
        let e = rot();
        let basis = build_basis(&f.c_bar(), 2, &f_true(), DEFAULT_RANK_TOL).unwrap();
        let (x, u) = regulator_direct_solve(&f, &e, &f_true()).unwrap();
        let prob = assemble_model_based(&Mat::identity(2, 2), &f, &e, &basis).unwrap();
        // δ by projecting the exact solution onto the kernel basis
        let w = vec(&stack_xu(&x, &u)) - vec(&stack_xu(basis.x(1), basis.u(1)));
        let mut chi = Vector::zeros(prob.omega.ncols());
        for l in 2..=basis.h() {
            chi[l - 2] = vec(&stack_xu(basis.x(l), basis.u(l))).dot(&w);
        }
        chi.rows_mut(basis.h() - 1, 6).copy_from(&vec(&stack_xu(&x, &u)));
        assert!(prob.residual(&chi) < 1e-10);
    }

    #[test]
    fn data_driven_assembly_matches_model_based() {
        let f = agent();
        let e = rot();
        let q = Mat::identity(2, 2);
        let r = Mat::identity(1, 1);
        let p = dare(&f.a, &f.b, &q, &r).unwrap().p;
        let basis = build_basis(&f.c_bar(), 2, &f_true(), DEFAULT_RANK_TOL).unwrap();
        let m_w = f.a.transpose() * &p;
        let l1 = &m_w * &f.b;
        let l3: Vec<Mat> = (1..=basis.h()).map(|l| &m_w * pi_l(&f, &e, basis.x(l))).collect();
        let dd = assemble_data_driven(&l3, &l1, &basis).unwrap();
        let mb = assemble_model_based(&m_w, &f, &e, &basis).unwrap();
        assert_abs_diff_eq!((&dd.omega - &mb.omega).amax(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((&dd.eta - &mb.eta).amax(), 0.0, epsilon = 1e-12);

        let zero = assemble_data_driven(&vec![Mat::zeros(2, 2); basis.h()], &Mat::zeros(2, 1), &basis).unwrap();
        assert_eq!(zero.omega.view((0, 0), (4, 10)).amax(), 0.0);
    }

    #[test]
    fn kappa_scaling() {
        assert_abs_diff_eq!(choose_kappa(&Mat::identity(3, 3), 1.0).unwrap(), 1.0);
        let om = from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let k1 = choose_kappa(&om, 1.0).unwrap();
        let k2 = choose_kappa(&(&om * 2.0), 1.0).unwrap();
        assert_abs_diff_eq!(k2, k1 / 4.0, epsilon = 1e-15);
        assert!(choose_kappa(&Mat::zeros(2, 2), 1.0).is_err());
    }

    #[test]
    fn iteration_solves_and_freezes_kernel_part() {
        let f = agent();
        let e = rot();
        let basis = build_basis(&f.c_bar(), 2, &f_true(), DEFAULT_RANK_TOL).unwrap();
        for m_w in [
            Mat::identity(2, 2),
            f.a.transpose() * dare(&f.a, &f.b, &Mat::identity(2, 2), &Mat::identity(1, 1)).unwrap().p,
        ] {
            let prob = assemble_model_based(&m_w, &f, &e, &basis).unwrap();
            let kappa = choose_kappa(&prob.omega, 1.0).unwrap();
            let chi0 = Vector::zeros(prob.omega.ncols());
            let run = iterate_chi(&prob, kappa, &chi0, 1e-12, 2_000_000).unwrap();
            assert!(regulator_residual(&f, &e, &f_true(), &run.x, &run.u) < 1e-8);
            for w in run.history.windows(2) {
                assert!(w[1].residual <= w[0].residual + 1e-12);
            }
            let ns = null_space_basis(&prob.omega, 1e-10);
            for v in ns {
                assert!(v.dot(&(&run.chi - &chi0)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn iteration_trivial_and_square_cases() {
        let prob = RegulatorProblem {
            omega: from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap(),
            eta: Vector::zeros(2),
            n: 1,
            m: 1,
            nv: 1,
        };
        let run = iterate_chi(&prob, 0.1, &Vector::zeros(2), 1e-12, 10).unwrap();
        assert_eq!(run.iterations, 1);
        let prob = RegulatorProblem {
            eta: Vector::from_vec(vec![1.0, -1.0]),
            ..prob
        };
        let kappa = choose_kappa(&prob.omega, 1.0).unwrap();
        let run = iterate_chi(&prob, kappa, &Vector::zeros(2), 1e-13, 100_000).unwrap();
        let direct = min_norm_least_squares(&prob.omega, &prob.eta, 1e-12).unwrap().x;
        assert_abs_diff_eq!((run.chi - direct).amax(), 0.0, epsilon = 1e-10);
        assert!(iterate_chi(&prob, 10.0, &Vector::zeros(2), 1e-3, 5).is_err());
    }

    #[test]
    fn feedforward_cases() {
        let u = from_rows(&[vec![1.0, 2.0]]).unwrap();
        let x = from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(feedforward_gain(&u, &Mat::zeros(1, 2), &x), u);
        assert_eq!(
            feedforward_gain(&u, &from_rows(&[vec![3.0, 4.0]]).unwrap(), &Mat::zeros(2, 2)),
            u
        );
    }
}
