use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coot::experiment::{
    build_report, compare_with_oracle, comparison_csv, load_config, oracle_solutions, run_experiment, write_outputs,
    Algorithm, ConfigFile, ExperimentConfig, Scheme,
};
use coot::matkit::to_rows;
use coot::{Error, Result};

#[derive(Parser)]
#[command(
    name = "coot",
    version,
    about = "Learn cooperative output-tracking controllers from data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the behavior policy and write the trajectory log.
    Simulate(Opts),
    /// Learn gains from a configuration file.
    Learn(Opts),
    /// Run the built-in four-agent example.
    ReproducePaper(Opts),
    /// Print model-based reference solutions.
    Oracle(Opts),
    /// Learn, then write per-iteration errors against the oracle.
    Compare(Opts),
}

#[derive(Args, Clone)]
struct Opts {
    /// JSON configuration; the built-in example when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["1", "2"])]
    algorithm: Option<String>,
    #[arg(long, value_parser = ["1", "2", "A", "B", "C"])]
    scheme: Option<String>,
    /// Fraction of the step-size bound, in (0, 1).
    #[arg(long)]
    a: Option<f64>,
    #[arg(long = "lambda-bar")]
    lambda_bar: Option<f64>,
    #[arg(long)]
    t0: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for interface compatibility; every signal is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

impl Opts {
    fn config(&self, require_file: bool) -> Result<ExperimentConfig> {
        let mut file = match &self.config {
            Some(p) => load_config(p)?.file,
            None if require_file => return Err(Error::Config("--config is required".into())),
            None => ConfigFile::paper_sec6(),
        };
        let l = &mut file.learning;
        let algorithm: Option<Algorithm> = self.algorithm.as_deref().map(str::parse).transpose()?;
        let scheme: Option<Scheme> = self.scheme.as_deref().map(str::parse).transpose()?;
        match (algorithm, scheme) {
            (Some(a), Some(s)) => {
                l.algorithm = a;
                l.scheme = s;
            }
            (Some(a), None) => {
                l.algorithm = a;
                if l.scheme.algorithm() != a {
                    l.scheme = if a == Algorithm::OffPolicy {
                        Scheme::Two
                    } else {
                        Scheme::A
                    };
                }
            }
            (None, Some(s)) => {
                l.scheme = s;
                l.algorithm = s.algorithm();
            }
            (None, None) => {}
        }
        if let Some(a) = self.a {
            l.a = a;
        }
        if let Some(lb) = self.lambda_bar {
            l.lambda_bar = lb;
        }
        if let Some(t0) = self.t0 {
            l.t0 = t0;
            file.collect_until = file.collect_until.max(t0 + 65);
        }
        if self.out.is_some() {
            file.out = self.out.clone();
        }
        file.validate()
    }
}

fn out_dir(cfg: &ExperimentConfig, fallback: &str) -> PathBuf {
    cfg.file.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn save_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg.file)? + "\n")?;
    Ok(())
}

fn learn(cfg: &ExperimentConfig, fallback: &str) -> Result<()> {
    let learned = run_experiment(cfg)?;
    let dir = out_dir(cfg, fallback);
    save_config(&dir, cfg)?;
    let report = write_outputs(&dir, cfg, &learned)?;
    print!("{}", report.to_text());
    println!("outputs written to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(o) => {
            let cfg = o.config(false)?;
            let log = cfg.behavior_log()?;
            let dir = out_dir(&cfg, "out/simulate");
            save_config(&dir, &cfg)?;
            log.write_csv(&dir.join("behavior.csv"))?;
            println!(
                "{} steps written to {}",
                log.steps.len(),
                dir.join("behavior.csv").display()
            );
        }
        Command::Learn(o) => learn(&o.config(true)?, "out/learn")?,
        Command::ReproducePaper(o) => learn(&o.config(false)?, "out/reproduce")?,
        Command::Oracle(o) => {
            let cfg = o.config(false)?;
            let sols = oracle_solutions(&cfg)?;
            let rows: Vec<_> = sols
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    serde_json::json!({
                        "agent": i + 1,
                        "p": to_rows(&s.p),
                        "k": to_rows(&s.k),
                        "h": to_rows(&s.h),
                        "x": to_rows(&s.x),
                        "u": to_rows(&s.u),
                        "t": to_rows(&s.t),
                    })
                })
                .collect();
            let text = serde_json::to_string_pretty(&rows)? + "\n";
            if let Some(dir) = &cfg.file.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("oracle.json"), &text)?;
            }
            print!("{text}");
        }
        Command::Compare(o) => {
            let cfg = o.config(false)?;
            let learned = run_experiment(&cfg)?;
            let cmp = compare_with_oracle(&cfg, &learned)?;
            let dir = out_dir(&cfg, "out/compare");
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("oracle_comparison.csv"), comparison_csv(&cmp))?;
            let report = build_report(&cfg, &learned)?;
            for a in &report.agents {
                println!(
                    "agent {}: |P-P*| = {:.4e}, |K-K*| = {:.4e}, |H-H*| = {}",
                    a.agent,
                    a.p_err,
                    a.k_err,
                    a.h_err.map(|h| format!("{h:.4e}")).unwrap_or_else(|| "n/a".into())
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
