//! Solves the regulator equations from learned data: the iterative χ solver
//! at several stopping tolerances, against the model-based answer.

use coot::experiment::ExperimentConfig;
use coot::offpolicy::{run_algorithm1, OffPolicyScheme};
use coot::oracle::{agent_oracle, regulator_residual};
use coot::regulator::{assemble_data_driven, assemble_model_based, solve_regulator, RegulatorSettings};

fn main() -> coot::Result<()> {
    let cfg = ExperimentConfig::paper_sec6();
    let log = cfg.behavior_log()?;
    let (e, ff) = (&cfg.mas.leader.e, &cfg.mas.leader.f);
    for i in 0..cfg.mas.n_agents() {
        let f = &cfg.mas.followers[i];
        let spec = cfg.agent_spec(i)?;
        let run = run_algorithm1(
            &log,
            &spec,
            &cfg.k0[i],
            85,
            None,
            OffPolicyScheme::Two,
            &cfg.learn,
            &cfg.regulator,
        )?;
        let learned = assemble_data_driven(&run.opt.l3, &run.opt.l1, &run.basis)?;

        let or = agent_oracle(f, e, ff, &cfg.q[i], &cfg.r[i])?;
        let exact = assemble_model_based(&(f.a.transpose() * &or.p), f, e, &run.basis)?;
        let gap = (&learned.omega - &exact.omega)
            .amax()
            .max((&learned.eta - &exact.eta).amax());
        println!(
            "agent {} (basis size {}, max |Ω − Ω*|, |η − η*| = {gap:.2e})",
            i + 1,
            run.basis.h()
        );

        for eps2 in [1e-4, 1e-8, 1e-12] {
            let settings = RegulatorSettings {
                eps2,
                max_iter: 10_000_000,
                ..Default::default()
            };
            let chi = solve_regulator(&learned, &settings)?;
            println!(
                "  ε2 = {eps2:.0e}: {:>6} iterations, regulator residual {:.3e}",
                chi.iterations,
                regulator_residual(f, e, ff, &chi.x, &chi.u)
            );
        }
    }
    Ok(())
}
