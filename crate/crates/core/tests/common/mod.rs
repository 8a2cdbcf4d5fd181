//! Random small systems and the property checks run on them.
#![allow(dead_code)]

use coot::matkit::{
    is_positive_definite, min_eigenvalue, norm2, spectral_radius, vecs, vecv, Mat, Vector, DEFAULT_RANK_TOL,
};
use coot::observer::ObserverState;
use coot::offpolicy::{
    build_regression_bundle, check_offpolicy_rank, minimal_horizon, solve_stab_regression, stabilizing_phase,
    AgentSpec, LearnSettings, OffPolicyScheme,
};
use coot::oracle::{are_residual, classic_pi, dare, dlyap, q_bar, q_r};
use coot::plant::{
    simulate_behavior, FollowerModel, InitialState, LeaderModel, MasModel, NoiseSpec, NoiseTerm, Topology, Wave,
};
use coot::regulator::{build_basis, pi_l};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one randomized check.
#[derive(Debug, Clone, PartialEq)]
pub enum Check {
    Pass,
    /// The draw is outside the check's domain (ill-posed, near a boundary).
    Skip,
    Fail(String),
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, span: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.gen_range(-span..span))
}

pub fn spd(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let m = uniform(rng, n, n, 1.0);
    m.transpose() * m + Mat::identity(n, n) * 0.2
}

pub struct RandomPlant {
    pub a: Mat,
    pub b: Mat,
    pub q: Mat,
    pub r: Mat,
}

/// `n ≤ 3`, `m ≤ 2`, entries in `[−1.2, 1.2)`, so open-loop unstable draws are common.
pub fn random_plant(rng: &mut ChaCha8Rng) -> RandomPlant {
    let n = rng.gen_range(1..=3);
    let m = rng.gen_range(1..=2);
    RandomPlant {
        a: uniform(rng, n, n, 1.2),
        b: uniform(rng, n, m, 1.2),
        q: spd(rng, n),
        r: spd(rng, m),
    }
}

pub fn rotation_leader() -> LeaderModel {
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    LeaderModel::new(
        Mat::from_row_slice(2, 2, &[c, s, -s, c]),
        Mat::from_row_slice(1, 2, &[-1.0, 0.0]),
    )
    .unwrap()
}

pub fn rich_noise() -> NoiseSpec {
    let freqs = [0.7, 1.3, 2.1, 2.9, 3.7, 4.3, 5.3, 6.1];
    NoiseSpec {
        terms: freqs
            .iter()
            .enumerate()
            .map(|(k, &f)| NoiseTerm {
                amplitude: 0.5,
                frequency: f,
                wave: if k % 2 == 0 { Wave::Sin } else { Wave::Cos },
            })
            .collect(),
        channel_phase: 1.0,
    }
}

/// Raw Kronecker solve of `H = Q_R + ΠᵀHΠ` with `Π = γ[I; −K][A B]`.
pub fn q_lyapunov_kron(a: &Mat, b: &Mat, k: &Mat, q: &Mat, r: &Mat, gamma: f64) -> Option<Mat> {
    let (n, m) = (a.nrows(), b.ncols());
    let mut stack = Mat::zeros(n + m, n);
    stack.view_mut((0, 0), (n, n)).copy_from(&Mat::identity(n, n));
    stack.view_mut((n, 0), (m, n)).copy_from(&(-k));
    let mut ab = Mat::zeros(n, n + m);
    ab.view_mut((0, 0), (n, n)).copy_from(a);
    ab.view_mut((0, n), (n, m)).copy_from(b);
    let pi = stack * ab * gamma;
    let d = n + m;
    let pt = pi.transpose();
    let lhs = Mat::identity(d * d, d * d) - pt.kronecker(&pt);
    let rhs = Vector::from_column_slice(q_r(q, r).as_slice());
    let sol = lhs.lu().solve(&rhs)?;
    let h = Mat::from_column_slice(d, d, sol.as_slice());
    Some((&h + h.transpose()) * 0.5)
}

/// Positive definite solution of the Q-function Lyapunov equation exists
/// exactly when `γ(A − BK)` is Schur.
pub fn q_lyapunov_pd_iff_schur(seed: u64) -> Check {
    let mut g = rng(seed);
    let p = random_plant(&mut g);
    let k = uniform(&mut g, p.b.ncols(), p.a.nrows(), 2.0);
    let gamma = g.gen_range(0.1..1.5);
    let rho = gamma * spectral_radius(&(&p.a - &p.b * &k)).unwrap();
    if (rho - 1.0).abs() < 1e-3 {
        return Check::Skip;
    }
    let Some(h) = q_lyapunov_kron(&p.a, &p.b, &k, &p.q, &p.r, gamma) else {
        return Check::Skip;
    };
    let pd = is_positive_definite(&h, 1e-10);
    if pd == (rho < 1.0) {
        Check::Pass
    } else {
        Check::Fail(format!("seed {seed}: ρ = {rho:.6}, H positive definite = {pd}"))
    }
}

pub fn vecs_identity(seed: u64) -> Check {
    let mut g = rng(seed);
    let n = g.gen_range(1..=6);
    let m = uniform(&mut g, n, n, 3.0);
    let s = (&m + m.transpose()) * 0.5;
    let x = Vector::from_fn(n, |_, _| g.gen_range(-3.0..3.0));
    let direct = (x.transpose() * &s * &x)[0];
    let via = vecs(&s).unwrap().dot(&vecv(&x));
    let scale = s.abs().max() * x.norm_squared();
    if (direct - via).abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        Check::Pass
    } else {
        Check::Fail(format!("seed {seed}: {direct} vs {via}"))
    }
}

/// Policy iteration from a stabilizing but suboptimal gain.
pub fn classic_pi_check(seed: u64) -> Check {
    let mut g = rng(seed);
    let p = random_plant(&mut g);
    let Ok(start) = dare(&p.a, &p.b, &(&p.q * 20.0), &p.r) else {
        return Check::Skip;
    };
    let Ok(star) = dare(&p.a, &p.b, &p.q, &p.r) else {
        return Check::Skip;
    };
    if norm2(&star.p) > 1e4 {
        return Check::Skip;
    }
    let res = match classic_pi(&p.a, &p.b, &p.q, &p.r, &start.k, 1e-11, 200) {
        Ok(r) => r,
        Err(e) => return Check::Fail(format!("seed {seed}: {e}")),
    };
    for w in res.history.windows(2) {
        let d = min_eigenvalue(&(&w[0].0 - &w[1].0));
        if d < -1e-10 {
            return Check::Fail(format!("seed {seed}: min eig(P^j − P^(j+1)) = {d:e}"));
        }
    }
    let resid = are_residual(&p.a, &p.b, &p.q, &p.r, &res.p).unwrap();
    if resid > 1e-8 {
        return Check::Fail(format!("seed {seed}: ARE residual {resid:e}"));
    }
    Check::Pass
}

/// Single-follower behavior data from a random plant with an exact observer.
pub struct RandomData {
    pub follower: FollowerModel,
    pub spec: AgentSpec,
    pub log: coot::plant::TrajectoryLog,
}

pub fn random_data(seed: u64, t_end: usize) -> Option<RandomData> {
    let mut g = rng(seed);
    let p = random_plant(&mut g);
    let (n, m) = (p.a.nrows(), p.b.ncols());
    let follower = FollowerModel::new(
        p.a.clone(),
        p.b.clone(),
        uniform(&mut g, 1, n, 1.0),
        uniform(&mut g, 1, m, 1.0),
    )
    .ok()?;
    let behavior = dare(&p.a, &p.b, &p.q, &p.r).ok()?;
    let leader = rotation_leader();
    let v0 = Vector::from_vec(vec![1.0, -1.0]);
    let mas = MasModel::new(leader.clone(), vec![follower.clone()], Topology::chain(1)).ok()?;
    let init = InitialState {
        observer: ObserverState::exact(&leader, &v0, 1),
        v: v0,
        x: vec![Vector::from_fn(n, |_, _| g.gen_range(-2.0..2.0))],
    };
    let log = simulate_behavior(&mas, &init, &[behavior.k], &[rich_noise()], t_end).ok()?;
    let spec = AgentSpec::new(0, &follower, p.q, p.r).ok()?;
    Some(RandomData { follower, spec, log })
}

fn max_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).amax()
}

/// Data-driven `(P̃, L₁ … L₅)` against their model-based values for every shift.
pub fn regression_faithfulness(seed: u64) -> Check {
    let Some(d) = random_data(seed, 160) else {
        return Check::Skip;
    };
    let f = &d.follower;
    let leader = rotation_leader();
    let Ok(basis) = build_basis(&d.spec.c_bar, d.spec.n, &leader.f, DEFAULT_RANK_TOL) else {
        return Check::Skip;
    };
    let t0 = 5;
    let found = minimal_horizon(t0, 160, |t| {
        let b = build_regression_bundle(&d.log, 0, &basis, t0, t)?;
        Ok(check_offpolicy_rank(&b, DEFAULT_RANK_TOL).satisfied())
    });
    let t_f = match found {
        Ok(Some(t)) => t,
        _ => return Check::Fail(format!("seed {seed}: rank condition never met")),
    };
    let bundle = build_regression_bundle(&d.log, 0, &basis, t0, t_f).unwrap();
    let mut g = rng(seed ^ 0x5eed);
    let k = uniform(&mut g, d.spec.m, d.spec.n, 1.0);
    let rho = spectral_radius(&(&f.a - &f.b * &k)).unwrap();
    let gamma = (0.6 / rho).min(1.0);
    let p = dlyap(&((&f.a - &f.b * &k) * gamma), &q_bar(&d.spec.q, &d.spec.r, &k)).unwrap();
    if norm2(&p) > 1e3 {
        return Check::Skip;
    }
    let mut worst = 0.0f64;
    for l in 0..=basis.h() {
        let reg = match solve_stab_regression(&bundle, l, &k, gamma, &d.spec.q, &d.spec.r, DEFAULT_RANK_TOL) {
            Ok(r) => r,
            Err(e) => return Check::Fail(format!("seed {seed}: shift {l}: {e}")),
        };
        let pi = if l == 0 {
            Mat::zeros(d.spec.n, 2)
        } else {
            pi_l(f, &leader.e, basis.x(l))
        };
        worst = worst
            .max(max_diff(&reg.p, &p))
            .max(max_diff(&reg.l1, &(f.a.transpose() * &p * &f.b)))
            .max(max_diff(&reg.l2, &(f.b.transpose() * &p * &f.b)))
            .max(max_diff(&reg.l3, &(f.a.transpose() * &p * &pi)))
            .max(max_diff(&reg.l4, &(f.b.transpose() * &p * &pi)))
            .max(max_diff(&reg.l5, &(pi.transpose() * &p * &pi)));
    }
    if worst <= 1e-6 {
        Check::Pass
    } else {
        Check::Fail(format!("seed {seed}: max deviation {worst:e}"))
    }
}

/// Every accepted stabilizing iterate keeps `γᵏ ρ(A − BK̃ᵏ) < 1`, starting
/// from `K̃⁰ = 0` on data collected under a different policy.
pub fn stabilizing_iterates_stay_schur(seed: u64) -> Check {
    let Some(d) = random_data(seed, 160) else {
        return Check::Skip;
    };
    let f = &d.follower;
    let leader = rotation_leader();
    let Ok(basis) = build_basis(&d.spec.c_bar, d.spec.n, &leader.f, DEFAULT_RANK_TOL) else {
        return Check::Skip;
    };
    let Ok(bundle) = build_regression_bundle(&d.log, 0, &basis, 5, 150) else {
        return Check::Skip;
    };
    let k0 = Mat::zeros(d.spec.m, d.spec.n);
    let run = match stabilizing_phase(&bundle, &k0, OffPolicyScheme::Two, &d.spec, &LearnSettings::default()) {
        Ok(r) => r,
        Err(e) => return Check::Fail(format!("seed {seed}: {e}")),
    };
    for s in &run.outcome.steps {
        let v = s.gamma * spectral_radius(&(&f.a - &f.b * &s.gain)).unwrap();
        if v >= 1.0 {
            return Check::Fail(format!("seed {seed}: iterate {} has γρ = {v}", s.k));
        }
    }
    let rho = spectral_radius(&(&f.a - &f.b * &run.outcome.gain)).unwrap();
    if rho >= 1.0 {
        return Check::Fail(format!("seed {seed}: returned gain has ρ = {rho}"));
    }
    Check::Pass
}

/// Runs `check` over `count` seeds, returning `(passed, skipped, failures)`.
pub fn sweep(count: u64, check: fn(u64) -> Check) -> (usize, usize, Vec<String>) {
    let (mut pass, mut skip, mut fails) = (0, 0, Vec::new());
    for seed in 0..count {
        match check(seed) {
            Check::Pass => pass += 1,
            Check::Skip => skip += 1,
            Check::Fail(m) => fails.push(m),
        }
    }
    (pass, skip, fails)
}
