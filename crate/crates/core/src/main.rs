use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tokenmoe::envs::Game;
use tokenmoe::netzoo::Encoder;
use tokenmoe::runner::{self, AggregateOptions, CmdError, GridOptions};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "tokenmoe", version, about = "Train, ablate and report mixture-of-experts Q-networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a config file.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory [default: $TOKENMOE_OUT/<label>/<game>/seed<N>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation preset over games and seeds, then aggregate and plot.
    Ablate {
        preset: String,
        #[arg(long, default_value_t = runner::DEFAULT_STEPS)]
        steps: u64,
        #[arg(long, default_value_t = runner::DEFAULT_SEEDS)]
        seeds: u64,
        /// Parallel runs [default: available cores]
        #[arg(long)]
        jobs: Option<usize>,
        /// Comma-separated subset of games
        #[arg(long, value_delimiter = ',')]
        games: Option<Vec<String>>,
        #[arg(long)]
        encoder: Option<String>,
        /// Output root [default: $TOKENMOE_OUT or ./runs]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print every config of the grid and exit.
        #[arg(long)]
        dry_run: bool,
        #[arg(long, default_value_t = tokenmoe::evalstats::DEFAULT_RESAMPLES)]
        resamples: usize,
    },
    /// Aggregate run directories into report.csv and report.svg.
    Aggregate {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = tokenmoe::evalstats::DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a report CSV (and optional learning curves) to SVG.
    Plot {
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run directories whose metrics become learning curves
        #[arg(long = "runs", num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

fn parse<T: std::str::FromStr<Err = tokenmoe::Error>>(s: &str) -> Result<T, CmdError> {
    s.parse().map_err(CmdError::usage)
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let dir = runner::cmd_train(&config, seed, out.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Ablate {
            preset,
            steps,
            seeds,
            jobs,
            games,
            encoder,
            out,
            dry_run,
            resamples,
        } => {
            let mut opts = GridOptions {
                steps,
                seeds,
                ..GridOptions::default()
            };
            if let Some(g) = games {
                opts.games = g.iter().map(|s| parse::<Game>(s)).collect::<Result<_, _>>()?;
            }
            if let Some(e) = encoder {
                opts.encoder = Some(parse::<Encoder>(&e)?);
            }
            if dry_run {
                let grid = runner::ablation_grid(&preset, &opts).map_err(CmdError::usage)?;
                print!("{}", runner::dry_run_listing(&grid));
                return Ok(());
            }
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let agg = AggregateOptions {
                resamples,
                ..AggregateOptions::default()
            };
            let out = out.unwrap_or_else(runner::default_out_root);
            let outcome = runner::cmd_ablate(&preset, &opts, jobs, &out, &agg)?;
            for (run, err) in &outcome.failures {
                eprintln!("warning: run {run} failed: {err}");
            }
            if !outcome.failures.is_empty() {
                eprintln!("warning: aggregated {} of {} runs", outcome.configs.len() - outcome.failures.len(), outcome.configs.len());
            }
            println!("{}", outcome.report_dir.display());
        }
        Command::Aggregate { runs, out, resamples, seed } => {
            let out = out.unwrap_or_else(runner::default_out_root);
            let agg = AggregateOptions {
                resamples,
                seed,
                ..AggregateOptions::default()
            };
            runner::cmd_aggregate(&runs, &out, &agg)?;
            println!("{}", out.join("report.csv").display());
        }
        Command::Plot { report, out, runs } => {
            let out = out.unwrap_or_else(|| report.with_extension("svg"));
            runner::cmd_plot(&report, &out, &runs)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
