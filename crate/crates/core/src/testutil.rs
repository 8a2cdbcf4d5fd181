//! Shared fixtures for unit tests: the four-agent chain example.

use crate::matkit::{from_rows, Mat, Vector};
use crate::plant::{
    simulate_behavior, FollowerModel, InitialState, LeaderModel, MasModel, NoiseSpec, Topology, TrajectoryLog,
};

pub fn follower(i: usize) -> FollowerModel {
    let b = if i <= 2 {
        vec![vec![0.0], vec![1.0]]
    } else {
        vec![vec![1.0], vec![0.0]]
    };
    FollowerModel::new(
        from_rows(&[vec![0.0, 1.0], vec![-1.0, -0.2 * i as f64]]).unwrap(),
        from_rows(&b).unwrap(),
        from_rows(&[vec![1.0, 0.0]]).unwrap(),
        Mat::identity(1, 1),
    )
    .unwrap()
}

pub fn leader() -> LeaderModel {
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    LeaderModel::new(
        from_rows(&[vec![c, s], vec![-s, c]]).unwrap(),
        from_rows(&[vec![-1.0, 0.0]]).unwrap(),
    )
    .unwrap()
}

pub fn mas() -> MasModel {
    MasModel::new(leader(), (1..=4).map(follower).collect(), Topology::chain(4)).unwrap()
}

pub fn behavior_log(mas: &MasModel, t_end: usize) -> TrajectoryLog {
    let init = InitialState::cold(
        mas,
        Vector::from_vec(vec![3.0, 3.0]),
        vec![Vector::from_vec(vec![5.0, -5.0]); mas.n_agents()],
    );
    let k0 = vec![Mat::zeros(1, 2); mas.n_agents()];
    let noise = vec![NoiseSpec::default_exploration(); mas.n_agents()];
    simulate_behavior(mas, &init, &k0, &noise, t_end).unwrap()
}
