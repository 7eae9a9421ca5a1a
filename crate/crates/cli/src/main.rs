use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdstab_cli::{run, RunOptions, Task, Verdict};

#[derive(Parser)]
#[command(name = "sdstab", version, about = "Sampled-data models, consistency and ISS certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Also write SVG plots.
    #[arg(long)]
    plot: bool,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one closed-loop model.
    Simulate(Common),
    /// Fit a one-step consistency certificate between two models.
    FitRepc(Common),
    /// Search the largest period cap for the multistep mismatch bound.
    CheckRepmc(Common),
    /// Fit an ISS certificate from simulated trials.
    FitIss(Common),
    /// Check an ISS certificate against random trials.
    VerifyIss(Common),
    /// Bisect for the largest admissible sampling period.
    FindTstar(Common),
    /// Carry an ISS certificate across a consistency certificate.
    Transfer(Common),
    /// Grid-check a Lyapunov decrease condition.
    CheckLyapunov(Common),
    /// Check the state between sampling instants against the ISS envelope.
    Intersample(Common),
    /// Run the cubic benchmark end to end.
    ReproduceExample(Common),
}

impl Command {
    fn split(self) -> (Task, Common) {
        match self {
            Command::Simulate(c) => (Task::Simulate, c),
            Command::FitRepc(c) => (Task::FitRepc, c),
            Command::CheckRepmc(c) => (Task::CheckRepmc, c),
            Command::FitIss(c) => (Task::FitIss, c),
            Command::VerifyIss(c) => (Task::VerifyIss, c),
            Command::FindTstar(c) => (Task::FindTstar, c),
            Command::Transfer(c) => (Task::Transfer, c),
            Command::CheckLyapunov(c) => (Task::CheckLyapunov, c),
            Command::Intersample(c) => (Task::Intersample, c),
            Command::ReproduceExample(c) => (Task::ReproduceExample, c),
        }
    }
}

fn init_threads() {
    let Ok(v) = std::env::var("SDSTAB_THREADS") else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("warning: SDSTAB_THREADS ignored: {e}");
            }
        }
        _ => eprintln!("warning: SDSTAB_THREADS must be a positive integer, got {v:?}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    let (task, common) = cli.command.split();
    let opts = RunOptions {
        plot: common.plot,
        out: common.out,
    };
    match run(task, &common.config, &opts) {
        Ok(outcome) => {
            for a in &outcome.artifacts {
                println!("wrote {}", a.display());
            }
            match outcome.verdict {
                Verdict::Pass => {
                    println!("{}: pass: {}", task.name(), outcome.summary);
                    ExitCode::SUCCESS
                }
                Verdict::Violation => {
                    println!("{}: violation: {}", task.name(), outcome.summary);
                    ExitCode::from(2)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
