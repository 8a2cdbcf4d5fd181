//! Model-based reference solutions: Riccati, Q-function matrix, regulator
//! equations and classic policy iteration from a stabilizing gain.

use coot::experiment::ExperimentConfig;
use coot::matkit::{norm2, spectral_radius, to_rows};
use coot::oracle::{agent_oracle, are_residual, classic_pi, regulator_residual};

fn main() -> coot::Result<()> {
    let cfg = ExperimentConfig::paper_sec6();
    let (e, ff) = (&cfg.mas.leader.e, &cfg.mas.leader.f);
    for (i, f) in cfg.mas.followers.iter().enumerate() {
        let (q, r) = (&cfg.q[i], &cfg.r[i]);
        let or = agent_oracle(f, e, ff, q, r)?;
        println!("agent {}", i + 1);
        println!("  K* = {:.6?}", to_rows(&or.k));
        println!("  ρ(A − BK*) = {:.4}", spectral_radius(&(&f.a - &f.b * &or.k))?);
        println!("  ARE residual {:.2e}", are_residual(&f.a, &f.b, q, r, &or.p)?);
        println!(
            "  regulator residual {:.2e}",
            regulator_residual(f, e, ff, &or.x, &or.u)
        );
        println!("  T* = {:.6?}", to_rows(&or.t));

        // Classic PI needs a stabilizing start; the optimal gain perturbed slightly is one.
        let start = &or.k * 0.9;
        let pi = classic_pi(&f.a, &f.b, q, r, &start, 1e-10, 50)?;
        let errs: Vec<String> = pi
            .history
            .iter()
            .map(|(p, _)| format!("{:.1e}", norm2(&(p - &or.p))))
            .collect();
        println!("  PI from 0.9·K*: ‖P^j − P*‖ = {}", errs.join(", "));
    }
    Ok(())
}
