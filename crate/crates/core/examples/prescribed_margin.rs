//! Raising λ̄ above one makes the stabilizing phase return a gain with
//! spectral radius below 1/λ̄.

use coot::experiment::ExperimentConfig;
use coot::matkit::spectral_radius;
use coot::offpolicy::{run_algorithm1, LearnSettings, OffPolicyScheme};

fn main() -> coot::Result<()> {
    let cfg = ExperimentConfig::paper_sec6();
    let log = cfg.behavior_log()?;
    let spec = cfg.agent_spec(0)?;
    let f = &cfg.mas.followers[0];
    for lambda_bar in [1.0, 1.25, 1.5, 2.0, 2.5] {
        let settings = LearnSettings {
            lambda_bar,
            ..cfg.learn.clone()
        };
        let run = run_algorithm1(
            &log,
            &spec,
            &cfg.k0[0],
            85,
            None,
            OffPolicyScheme::Two,
            &settings,
            &cfg.regulator,
        )?;
        let k = &run.stab.outcome.gain;
        let rho = spectral_radius(&(&f.a - &f.b * k))?;
        println!(
            "λ̄ = {lambda_bar:.2}: {} steps, ρ(A1 − B1K̃) = {rho:.4} (bound {:.4})",
            run.stab.outcome.final_index,
            1.0 / lambda_bar
        );
    }
    Ok(())
}
