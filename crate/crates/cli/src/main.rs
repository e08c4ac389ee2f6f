//! `crx-isac`: train agents, evaluate strategies, run the SNR and aperture
//! sweeps, and run the oracle checks.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use crx_isac::harness::{
    self, EvaluationRecord, ExperimentConfig, Profile, RunInfo, StrategyRun, StrategyTag, SweepAxis,
};
use crx_isac::verify;

#[derive(Parser, Debug)]
#[command(name = "crx-isac", version, about = "Crosstalk-aware movable-antenna ISAC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file overriding fields of the selected profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// FPA_RBF, FPA_TD3, MA_TD3 or CR_MA_TD3.
    #[arg(long, global = true)]
    strategy: Option<StrategyTag>,
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train the selected strategy for every seed and save checkpoints.
    Train,
    /// Evaluate strategies at the configured SNR, reusing checkpoints from the output directory.
    Eval,
    /// Evaluate strategies over the SNR grid without retraining.
    SweepSnr,
    /// Retrain the selected strategy at every region width.
    SweepRegion,
    /// Run the oracle checks of the analytic layer.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::SweepSnr => "sweep-snr",
            Command::SweepRegion => "sweep-region",
            Command::Verify => "verify",
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = cli.profile.config();
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml_over(&text, &base).with_context(|| format!("parsing {}", path.display()))?
        }
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(strategy) = cli.strategy {
        cfg.strategy = strategy;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_records(records: &[EvaluationRecord]) {
    println!("strategy   seed  snr_db  region_lambda  crb_db     reward     feasible");
    for r in records {
        println!(
            "{:<10} {:>4} {:>7.1} {:>14.2} {:>8.3} {:>10.5} {:>9.3}",
            r.strategy.as_str(),
            r.seed,
            r.snr_db,
            r.region_lambda,
            r.crb_db,
            r.mean_reward,
            r.feasibility
        );
    }
}

fn emit(
    cli: &Cli,
    cfg: &ExperimentConfig,
    started: Instant,
    records: &[EvaluationRecord],
    axis: Option<SweepAxis>,
    runs: &[StrategyRun],
) -> Result<()> {
    let info = RunInfo {
        command: cli.command.name().to_string(),
        profile: cli.profile,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let name = cli.command.name().replace('-', "_");
    let files = harness::emit_results(&cli.out, &name, cfg, &info, records, axis, runs)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn strategies(cli: &Cli) -> Vec<StrategyTag> {
    match cli.strategy {
        Some(s) => vec![s],
        None => StrategyTag::ALL.to_vec(),
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let started = Instant::now();
    match cli.command {
        Command::Train => {
            let runs = harness::run_strategies(&[cfg.strategy], &cfg)?;
            let records = runs.iter().map(|r| r.record(&cfg, cfg.snr_db)).collect::<Result<Vec<_>, _>>()?;
            for run in &runs {
                if let Some(t) = &run.training {
                    println!(
                        "{} seed {}: tail greedy reward {:.5}",
                        run.strategy,
                        run.seed,
                        t.tail_eval_reward(cfg.td3.tail_episodes)
                    );
                }
            }
            print_records(&records);
            for path in harness::save_checkpoints(&cli.out, &runs)? {
                println!("wrote {}", path.display());
            }
            emit(cli, &cfg, started, &records, None, &runs)?;
        }
        Command::Eval => {
            let runs = harness::load_or_run_all(&cli.out, &strategies(cli), &cfg)?;
            let records = runs.iter().map(|r| r.record(&cfg, cfg.snr_db)).collect::<Result<Vec<_>, _>>()?;
            print_records(&records);
            emit(cli, &cfg, started, &records, None, &runs)?;
        }
        Command::SweepSnr => {
            let (runs, records) = harness::snr_sweep(&cfg, &strategies(cli))?;
            print_records(&records);
            emit(cli, &cfg, started, &records, Some(SweepAxis::Snr), &runs)?;
        }
        Command::SweepRegion => {
            let (runs, records) = harness::region_sweep(&cfg)?;
            print_records(&records);
            emit(cli, &cfg, started, &records, Some(SweepAxis::Region), &runs)?;
        }
        Command::Verify => {
            let env = cfg.env_config(cfg.strategy)?;
            let seed = cfg.seeds[0];
            let outcomes = verify::run_all(&env, seed)?;
            for o in &outcomes {
                println!("{o}");
            }
            return Ok(outcomes.iter().all(|o| o.passed()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
