//! Q-learning variant: learns the state-action matrix H directly and needs a
//! shorter data window than the off-policy regression.
//!
//!     cargo run --example q_learning -- [A|B|C]

use coot::experiment::ExperimentConfig;
use coot::matkit::norm2;
use coot::oracle::agent_oracle;
use coot::qlearn::{run_algorithm2, QScheme};

fn main() -> coot::Result<()> {
    let scheme = match std::env::args().nth(1).as_deref() {
        Some("B") => QScheme::B,
        Some("C") => QScheme::C,
        _ => QScheme::A,
    };
    let cfg = ExperimentConfig::paper_sec6();
    let log = cfg.behavior_log()?;
    for i in 0..cfg.mas.n_agents() {
        let spec = cfg.agent_spec(i)?;
        let f = &cfg.mas.followers[i];
        let run = run_algorithm2(
            &log,
            &spec,
            &cfg.k0[i],
            cfg.file.learning.t0,
            None,
            scheme,
            &cfg.learn,
            &cfg.regulator,
        )?;
        let or = agent_oracle(f, &cfg.mas.leader.e, &cfg.mas.leader.f, &cfg.q[i], &cfg.r[i])?;
        println!(
            "agent {}: t_f = {}, stabilizing index {}, ‖H − H*‖ = {:.2e}, ‖K − K*‖ = {:.2e}",
            i + 1,
            run.t_f,
            run.stab.outcome.final_index,
            norm2(&(&run.opt.h - &or.h)),
            norm2(&(&run.k - &or.k)),
        );
    }
    Ok(())
}
