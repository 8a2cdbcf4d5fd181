//! Learns each follower's controller from one behavior log with the
//! off-policy algorithm, starting from the non-stabilizing gain K̃⁰ = 0.
//!
//!     cargo run --example offpolicy_learning -- [1|2]

use coot::experiment::{Algorithm, ConfigFile, Scheme};
use coot::matkit::{spectral_radius, to_rows};
use coot::offpolicy::{run_algorithm1, OffPolicyScheme};

fn main() -> coot::Result<()> {
    let scheme = match std::env::args().nth(1).as_deref() {
        Some("1") => OffPolicyScheme::One,
        _ => OffPolicyScheme::Two,
    };
    let mut file = ConfigFile::paper_sec6();
    file.learning.algorithm = Algorithm::OffPolicy;
    file.learning.scheme = if scheme == OffPolicyScheme::One {
        Scheme::One
    } else {
        Scheme::Two
    };
    let cfg = file.validate()?;
    let log = cfg.behavior_log()?;

    for i in 0..cfg.mas.n_agents() {
        let spec = cfg.agent_spec(i)?;
        let f = &cfg.mas.followers[i];
        let run = run_algorithm1(
            &log,
            &spec,
            &cfg.k0[i],
            cfg.file.learning.t0,
            None,
            scheme,
            &cfg.learn,
            &cfg.regulator,
        )?;
        println!(
            "agent {}  (window [{}, {}], rank {}/{})",
            i + 1,
            cfg.file.learning.t0,
            run.t_f,
            run.rank.achieved,
            run.rank.required
        );
        println!("  β̃ = {:.2}", run.stab.beta);
        for s in &run.stab.outcome.steps {
            let rho = spectral_radius(&(&f.a - &f.b * &s.gain))?;
            println!("  k = {:>2}  γ = {:.4}  ρ(A − BK̃ᵏ) = {rho:.4}", s.k, s.gamma);
        }
        let k = &run.stab.outcome.gain;
        println!(
            "  stabilizing K̃^{} = [{:.4}, {:.4}], ρ = {:.4}",
            run.stab.outcome.final_index,
            k[(0, 0)],
            k[(0, 1)],
            spectral_radius(&(&f.a - &f.b * k))?
        );
        println!(
            "  optimal K̂ = [{:.6}, {:.6}] after {} improvements",
            run.k[(0, 0)],
            run.k[(0, 1)],
            run.opt.final_index
        );
        println!("  T̂ = {:.6?}", to_rows(&run.t));
    }
    Ok(())
}
