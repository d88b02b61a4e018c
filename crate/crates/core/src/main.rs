use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use avlex::config::RunConfig;
use avlex::pipeline::{run_all, run_report, run_stage, Stage};
use avlex::synth::{generate, write_corpus, SynthSpec};
use avlex::Result;

#[derive(Parser)]
#[command(name = "avlex", version, about = "Ground spoken words in images and discover a lexicon")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (flat key=value).
    #[arg(long, default_value = "avlex.conf")]
    config: PathBuf,
    /// Overrides the root seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the worker count from the config.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Train the two-branch embedding network.
    Train(RunArgs),
    /// Embed the held-out pairs for retrieval evaluation.
    Embed(RunArgs),
    /// Emit the crop boxes an external feature provider should score.
    Propose(RunArgs),
    /// Score and select crop/segment groundings for every pair.
    Ground(RunArgs),
    /// Cluster grounded segments and crops, then link the clusterings.
    Cluster(RunArgs),
    /// Compute retrieval and cluster metrics.
    Evaluate(RunArgs),
    /// Print the collected result tables.
    Report {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "csv")]
        format: ReportFormat,
    },
    /// Run train, embed, ground, cluster, evaluate and report in order.
    All(RunArgs),
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        spec: PathBuf,
    },
}

fn load(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = w.max(1);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (stage, args) = match &cli.command {
        Command::Synth { spec } => {
            let spec = SynthSpec::load(spec)?;
            let corpus = generate(&spec)?;
            return write_corpus(&corpus, &spec.out_dir);
        }
        Command::Report { run, format: ReportFormat::Csv } => {
            print!("{}", run_report(&load(run)?)?);
            return Ok(());
        }
        Command::All(a) => {
            let cfg = load(a)?;
            run_all(&cfg)?;
            print!("{}", run_report(&cfg)?);
            return Ok(());
        }
        Command::Train(a) => (Stage::Train, a),
        Command::Embed(a) => (Stage::Embed, a),
        Command::Propose(a) => (Stage::Propose, a),
        Command::Ground(a) => (Stage::Ground, a),
        Command::Cluster(a) => (Stage::Cluster, a),
        Command::Evaluate(a) => (Stage::Evaluate, a),
    };
    run_stage(stage, &load(args)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("avlex: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
