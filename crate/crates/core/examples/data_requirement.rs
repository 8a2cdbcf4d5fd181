//! How many samples each algorithm needs before its regressions become
//! uniquely solvable, as a function of the window start t₀.

use coot::experiment::ConfigFile;
use coot::offpolicy::{build_regression_bundle, check_offpolicy_rank, minimal_horizon};
use coot::qlearn::{build_q_regression, check_q_rank, check_regulator_data_rank};
use coot::regulator::build_basis;

fn main() -> coot::Result<()> {
    let mut file = ConfigFile::paper_sec6();
    file.collect_until = 400;
    let cfg = file.validate()?;
    let log = cfg.behavior_log()?;
    let tol = cfg.learn.rank_tol;
    println!("agent   t0   t_f off-policy   t_f Q-learning");
    for i in 0..cfg.mas.n_agents() {
        let spec = cfg.agent_spec(i)?;
        for t0 in [20, 85, 200] {
            let f_obs = log.require(t0)?.observer.f[i].clone();
            let basis = build_basis(&spec.c_bar, spec.n, &f_obs, tol)?;
            let off = minimal_horizon(t0, 390, |t| {
                Ok(check_offpolicy_rank(&build_regression_bundle(&log, i, &basis, t0, t)?, tol).satisfied())
            })?;
            let q = minimal_horizon(t0, 390, |t| {
                let b = build_regression_bundle(&log, i, &basis, t0, t)?;
                let qreg = build_q_regression(&log, i, t0, t)?;
                Ok(check_q_rank(&qreg, tol).satisfied() && check_regulator_data_rank(&b, tol).satisfied())
            })?;
            let show = |t: Option<usize>| t.map_or("none".to_string(), |t| t.to_string());
            println!("{:>5} {t0:>4}   {:>14}   {:>14}", i + 1, show(off), show(q));
        }
    }
    Ok(())
}
