//! Step-size bounds of every scheme along the same stabilizing runs, and the
//! equality of the off-policy Scheme 2 and Q-learning Scheme A sequences.

use coot::experiment::ExperimentConfig;
use coot::offpolicy::{run_algorithm1, OffPolicyScheme};
use coot::qlearn::{run_algorithm2, QScheme};

fn main() -> coot::Result<()> {
    let cfg = ExperimentConfig::paper_sec6();
    let log = cfg.behavior_log()?;
    let t0 = cfg.file.learning.t0;
    for i in 0..cfg.mas.n_agents() {
        let spec = cfg.agent_spec(i)?;
        let alg1 = run_algorithm1(
            &log,
            &spec,
            &cfg.k0[i],
            t0,
            None,
            OffPolicyScheme::Two,
            &cfg.learn,
            &cfg.regulator,
        )?;
        let alg2 = run_algorithm2(
            &log,
            &spec,
            &cfg.k0[i],
            t0,
            None,
            QScheme::A,
            &cfg.learn,
            &cfg.regulator,
        )?;
        println!("agent {}", i + 1);
        println!("   k      ᾱ1        ᾱ2        ᾱA        ᾱB        ᾱC");
        for (p, q) in alg1.stab.bounds.iter().zip(&alg2.stab.bounds) {
            println!(
                "  {:>2}  {:.3e} {:.3e} {:.3e} {:.3e} {:.3e}",
                p.k, p.pseudo, p.monotone, q.a, q.b, q.c
            );
        }
        let diff = alg1
            .stab
            .gains()
            .iter()
            .zip(alg2.stab.gains())
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        println!("  max gain difference Scheme 2 vs Scheme A: {diff:.2e}");
    }
    Ok(())
}
