//! End-to-end run from a JSON configuration: learn, deploy, compare with the
//! oracle and write every CSV/JSON artifact.
//!
//!     cargo run --example full_experiment -- crates/core/data/paper_sec6.json out/run

use std::path::PathBuf;

use coot::experiment::{load_config, run_experiment, write_outputs, ExperimentConfig};

fn main() -> coot::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(p) => load_config(&PathBuf::from(p))?,
        None => ExperimentConfig::paper_sec6(),
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/full_experiment".into()));
    let learned = run_experiment(&cfg)?;
    let report = write_outputs(&out, &cfg, &learned)?;
    print!("{}", report.to_text());
    if let Some(s) = learned.settling_step(1e-2) {
        println!("tracking error below 1e-2 from step {s} after deployment");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
