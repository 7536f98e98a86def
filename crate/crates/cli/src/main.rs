use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use commands::CliError;

#[derive(Parser)]
#[command(name = "blocksim", version, about = "Block dissemination experiments on peer-to-peer networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a topology and print its conductance and stability bounds.
    Topology(TopologyArgs),
    /// Run the experiment described by a config file.
    Simulate(SimulateArgs),
    /// Estimate the critical arrival rate from batch clearing times.
    Saturate(SaturateArgs),
    /// Check causality, monotonicity, homogeneity and separability on random instances.
    Properties(PropertiesArgs),
    /// Report distinguished path, confirmed blocks and degrees of an exported DAG.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Complete,
    Star,
    Torus,
    Btree,
    ErdosRenyi,
    RandomRegular,
    PrefAttach,
    Geometric,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long, value_enum)]
    family: Family,
    /// Number of peers.
    #[arg(long)]
    n: Option<usize>,
    /// Torus dimension.
    #[arg(long, default_value_t = 1)]
    dim: u32,
    /// Torus neighborhood radius.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Tree branching factor.
    #[arg(long)]
    branching: Option<usize>,
    /// Tree depth.
    #[arg(long)]
    depth: Option<u32>,
    /// Erdos-Renyi link probability.
    #[arg(long)]
    p: Option<f64>,
    /// Degree for random-regular and preferential-attachment graphs.
    #[arg(long)]
    d: Option<usize>,
    /// Geometric radius constant.
    #[arg(long)]
    c: Option<f64>,
    /// Seed for random families and, for `saturate`, the simulation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TopologyArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Per-peer communication rate in blocks per second.
    #[arg(long, default_value_t = 1.0)]
    bandwidth: f64,
    /// Enumerate every cut (at most 20 peers).
    #[arg(long, conflicts_with = "heuristic")]
    exact: bool,
    /// Use the heuristic cut family even for small graphs.
    #[arg(long)]
    heuristic: bool,
    /// Write the graph as an edge list.
    #[arg(long)]
    edge_list: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the replication count.
    #[arg(long)]
    replications: Option<usize>,
    /// Worker threads for replications.
    #[arg(long)]
    jobs: Option<usize>,
    /// Sweep Poisson arrival rates, `start:stop:step`.
    #[arg(long)]
    lambda_grid: Option<String>,
    /// Output directory for artifacts.
    #[arg(long, env = "BLOCKSIM_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Write the event transcript of the first replication (`-` for stdout).
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Export the final DAG of the first replication.
    #[arg(long)]
    dag: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SaturateArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, default_value_t = 1.0)]
    bandwidth: f64,
    /// Largest batch size of the doubling ladder.
    #[arg(long, default_value_t = 128)]
    n_max: usize,
    #[arg(long, default_value_t = 30)]
    replications: usize,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PropertiesArgs {
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Tree,
    ThroughputOptimal,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// DAG export, as written by `simulate --dag`.
    dag: PathBuf,
    /// Policy the DAG was built under.
    #[arg(long, value_enum, default_value = "tree")]
    policy: PolicyArg,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Topology(a) => commands::topology(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Saturate(a) => commands::saturate(a),
        Command::Properties(a) => commands::properties(a),
        Command::Analyze(a) => commands::analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
