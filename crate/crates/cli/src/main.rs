mod bench;
mod planner;
mod serve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "gymfleet", version, about = "Replica managers, data server, capacity planner and desk experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one replica manager over HTTP.
    Manager {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `listen` from the config file.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run the data server over HTTP.
    Server {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run sim managers and a data server in one process.
    Fleet(serve::FleetArgs),
    #[command(subcommand)]
    Planner(PlannerCommand),
    #[command(subcommand)]
    Tasks(TasksCommand),
    /// Run one desk experiment and write its CSV.
    Bench {
        experiment: Experiment,
        #[arg(long)]
        config: PathBuf,
        /// `-` writes to standard output.
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PlannerCommand {
    /// Cheapest fleet for N replicas, as JSON followed by a table.
    Plan {
        #[arg(long)]
        replicas: u64,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = gymfleet::planner::DEFAULT_CPU_OVERSUBSCRIPTION)]
        oversubscription: f64,
    },
    /// Overload fraction against group size, as CSV.
    Contention {
        #[arg(long, value_delimiter = ',', required = true)]
        k_sweep: Vec<u64>,
        #[arg(long)]
        profile: PathBuf,
        /// Cores on the shared machine; defaults to K, one core per replica.
        #[arg(long)]
        cores: Option<f64>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Binomial tail instead of Monte Carlo.
        #[arg(long)]
        exact: bool,
    },
}

#[derive(Subcommand)]
enum TasksCommand {
    /// Parse every task file under a directory.
    Validate { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Throughput,
    Latency,
    Recovery,
    Datagen,
    Chaos,
    Async,
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Planner(PlannerCommand::Plan { replicas, catalog, profile, oversubscription }) => {
            planner::plan(replicas, &catalog, &profile, oversubscription)
        }
        Command::Planner(PlannerCommand::Contention { k_sweep, profile, cores, trials, seed, exact }) => {
            planner::contention(&k_sweep, &profile, cores, trials, seed, exact)
        }
        Command::Tasks(TasksCommand::Validate { dir }) => serve::validate_tasks(&dir),
        command => match runtime() {
            Err(e) => Err(format!("tokio runtime: {e}")),
            Ok(rt) => rt.block_on(async move {
                match command {
                    Command::Manager { config, listen } => serve::manager(&config, listen).await,
                    Command::Server { config, tasks, store, listen } => {
                        serve::server(&config, &tasks, &store, listen).await
                    }
                    Command::Fleet(args) => serve::fleet(args).await,
                    Command::Bench { experiment, config, out } => bench::run(experiment, &config, &out).await,
                    Command::Planner(_) | Command::Tasks(_) => unreachable!(),
                }
            }),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
