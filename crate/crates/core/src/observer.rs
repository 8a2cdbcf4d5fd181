//! Distributed estimation of the leader's `(E, F, v)` over the graph.

use crate::matkit::{norm2, Mat, Vector};
use crate::plant::{LeaderModel, MasModel, Topology};

/// Per-follower estimates; index `i` holds agent `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub e: Vec<Mat>,
    pub f: Vec<Mat>,
    pub zeta: Vec<Vector>,
}

impl ObserverState {
    pub fn zeros(mas: &MasModel) -> Self {
        let nv = mas.leader.nv();
        let ny = mas.leader.f.nrows();
        let n = mas.n_agents();
        Self {
            e: vec![Mat::zeros(nv, nv); n],
            f: vec![Mat::zeros(ny, nv); n],
            zeta: vec![Vector::zeros(nv); n],
        }
    }

    /// Every agent already knows the leader exactly.
    pub fn exact(leader: &LeaderModel, v: &Vector, agents: usize) -> Self {
        Self {
            e: vec![leader.e.clone(); agents],
            f: vec![leader.f.clone(); agents],
            zeta: vec![v.clone(); agents],
        }
    }
}

/// One synchronous step; the leader is node 0 and contributes exact values.
pub fn observer_step(topo: &Topology, leader: &LeaderModel, v: &Vector, st: &ObserverState) -> ObserverState {
    let n = topo.followers();
    let e_of = |j: usize| if j == 0 { &leader.e } else { &st.e[j - 1] };
    let f_of = |j: usize| if j == 0 { &leader.f } else { &st.f[j - 1] };
    let z_of = |j: usize| if j == 0 { v } else { &st.zeta[j - 1] };

    let mut out = st.clone();
    for i in 1..=n {
        let mu = topo.mu(i);
        let (ei, fi, zi) = (&st.e[i - 1], &st.f[i - 1], &st.zeta[i - 1]);
        let mut de = Mat::zeros(ei.nrows(), ei.ncols());
        let mut df = Mat::zeros(fi.nrows(), fi.ncols());
        let mut dz = Vector::zeros(zi.len());
        for j in 0..=n {
            let a = topo.a(i, j);
            if a == 0.0 || j == i {
                continue;
            }
            de += (e_of(j) - ei) * a;
            df += (f_of(j) - fi) * a;
            dz += (z_of(j) - zi) * a;
        }
        out.e[i - 1] = ei + de * mu;
        out.f[i - 1] = fi + df * mu;
        out.zeta[i - 1] = ei * zi + ei * dz * mu;
    }
    out
}

/// Spectral norms of `Ẽ_i`, `F̃_i` and Euclidean norm of `ζ̃_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverErrors {
    pub e: f64,
    pub f: f64,
    pub zeta: f64,
}

pub fn observer_errors(st: &ObserverState, leader: &LeaderModel, v: &Vector) -> Vec<ObserverErrors> {
    st.e.iter()
        .zip(&st.f)
        .zip(&st.zeta)
        .map(|((e, f), z)| ObserverErrors {
            e: norm2(&(e - &leader.e)),
            f: norm2(&(f - &leader.f)),
            zeta: (z - v).norm(),
        })
        .collect()
}
