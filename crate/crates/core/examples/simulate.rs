//! Runs the exploratory behavior policy on the four-agent chain and reports
//! how quickly the distributed observer locks onto the leader.
//!
//!     cargo run --example simulate -- out/behavior.csv

use coot::experiment::ExperimentConfig;
use coot::observer::observer_errors;

fn main() -> coot::Result<()> {
    let cfg = ExperimentConfig::paper_sec6();
    let log = cfg.behavior_log()?;

    for t in [0, 10, 25, 50, 85, 100, 150] {
        let snap = log.require(t)?;
        let errs = observer_errors(&snap.observer, &cfg.mas.leader, &snap.v);
        let worst = errs.iter().map(|e| e.zeta.max(e.e).max(e.f)).fold(0.0, f64::max);
        let track = snap.error.iter().map(|e| e.amax()).fold(0.0, f64::max);
        println!("t = {t:>3}  observer error {worst:.3e}  max |e_i| {track:.3}");
    }

    if let Some(path) = std::env::args().nth(1) {
        log.write_csv(std::path::Path::new(&path))?;
        println!("wrote {path}");
    }
    Ok(())
}
