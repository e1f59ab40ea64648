//! `holdlqg` batch front end.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use holdlqg::io::{parse_config, parse_schedule, schedule_to_json, write_gains_csv, write_results_csv, write_trace_csv, Experiment};
use holdlqg::netsim::{monte_carlo, run_episode, Baseline, PolicySpec};
use holdlqg::oracle::{lqr_reduction, oracle_check, DEFAULT_BUDGET};
use holdlqg::{synthesize, Error, GainSchedule};

#[derive(Parser)]
#[command(name = "holdlqg", version, about = "Optimal hold-input LQG over a delayed, lossy channel with acknowledgments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the gain schedule for a configuration.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        /// Schedule JSON destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo evaluation of the optimal schedule and baselines.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Precomputed schedule; synthesized from the config when omitted.
        #[arg(long)]
        gains: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Results CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step trace of trial 0 under the optimal schedule.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Baselines to compare against (overrides the config list).
        #[arg(long, value_parser = ["lqr-hold", "zero-input", "open-loop"])]
        baseline: Vec<String>,
    },
    /// Compare a schedule with the brute-force dynamic programming oracle.
    OracleCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        gains: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Maximum number of channel realizations to enumerate.
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: u128,
    },
    /// Check that zero delay reduces to classical LQR for the config's model.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Flat `t,tau,row,col,value` CSV of a schedule.
    Export {
        #[arg(long, required_unless_present = "config")]
        gains: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Error(Error),
    Deviation(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Error(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Deviation(_) => 4,
            Failure::Error(e) => match e {
                Error::Indefinite { .. } => 3,
                Error::Budget { .. } => 5,
                Error::Io(_) | Error::Oracle(_) | Error::MissingControl(_) | Error::Protocol(_) => 1,
                Error::InvalidPmf(_)
                | Error::Domain(_)
                | Error::Dimension(_)
                | Error::InvalidModel(_)
                | Error::Schedule(_)
                | Error::Parse(_) => 2,
            },
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Error(Error::Io(format!("{}: {e}", path.display()))))
}

fn load_config(path: &Path) -> Result<Experiment, Failure> {
    Ok(parse_config(&read(path)?)?)
}

fn load_schedule(path: &Path, exp: Option<&Experiment>) -> Result<GainSchedule, Failure> {
    let schedule = parse_schedule(&read(path)?)?;
    if let Some(exp) = exp {
        let model = &exp.model;
        if schedule.n != model.n() || schedule.m != model.m() || schedule.horizon != model.horizon {
            return Err(Error::Dimension(format!(
                "schedule is n = {}, m = {}, N = {} but config is n = {}, m = {}, N = {}",
                schedule.n,
                schedule.m,
                schedule.horizon,
                model.n(),
                model.m(),
                model.horizon
            ))
            .into());
        }
    }
    Ok(schedule)
}

fn schedule_for(exp: &Experiment, gains: Option<&Path>) -> Result<GainSchedule, Failure> {
    match gains {
        Some(p) => load_schedule(p, Some(exp)),
        None => Ok(synthesize(&exp.model, &exp.pmf)?),
    }
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synthesize { config, out } => {
            let exp = load_config(&config)?;
            let schedule = synthesize(&exp.model, &exp.pmf)?;
            let mut w = sink(out.as_deref())?;
            w.write_all(schedule_to_json(&schedule)?.as_bytes())?;
            w.flush()?;
        }
        Command::Simulate { config, gains, trials, seed, out, trace, baseline } => {
            let exp = load_config(&config)?;
            let schedule = schedule_for(&exp, gains.as_deref())?;
            let baselines = if baseline.is_empty() {
                exp.baselines.clone()
            } else {
                baseline.iter().map(|b| Baseline::parse(b)).collect::<Result<Vec<_>, _>>()?
            };
            let seed = seed.unwrap_or(exp.seed);
            let trials = trials.unwrap_or(exp.trials);
            let mut policies = vec![PolicySpec::optimal(schedule)];
            policies.extend(baselines.into_iter().map(|b| PolicySpec::baseline(b, &exp.model)));
            let results = monte_carlo(&exp.model, &exp.pmf, &policies, &exp.x0, trials, seed, &exp.noise)?;
            if let Some(path) = trace {
                let tr = run_episode(&exp.model, &exp.pmf, &policies[0], &exp.x0, seed, &exp.noise)?;
                write_trace_csv(&tr, exp.model.n(), exp.model.m(), BufWriter::new(File::create(path)?))?;
            }
            write_results_csv(&results, sink(out.as_deref())?)?;
        }
        Command::OracleCheck { config, gains, tol, budget } => {
            let exp = load_config(&config)?;
            let schedule = schedule_for(&exp, gains.as_deref())?;
            let report = oracle_check(&exp.model, &exp.pmf, &schedule, tol, budget)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            if !report.passed {
                return Err(Failure::Deviation(format!(
                    "max gain deviation {:e}, stationarity {:e}",
                    report.gains.max_deviation, report.stationarity
                )));
            }
        }
        Command::Validate { config, tol } => {
            let exp = load_config(&config)?;
            let report = lqr_reduction(&exp.model, tol)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            if !report.passed {
                return Err(Failure::Deviation(format!(
                    "max deviation from LQR {:e}, control blocks zero: {}",
                    report.max_deviation, report.control_blocks_zero
                )));
            }
        }
        Command::Export { gains, config, out } => {
            let exp = config.as_deref().map(load_config).transpose()?;
            let schedule = match (&gains, &exp) {
                (Some(g), _) => load_schedule(g, exp.as_ref())?,
                (None, Some(e)) => synthesize(&e.model, &e.pmf)?,
                (None, None) => unreachable!("clap requires --gains or --config"),
            };
            write_gains_csv(&schedule, sink(out.as_deref())?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Error(e) => eprintln!("holdlqg: {e}"),
                Failure::Deviation(msg) => eprintln!("holdlqg: check failed: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
