use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use micl_core::exemplar::Arm;
use micl_core::pipeline::{self, Overrides, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "micl", version, about = "Few-shot in-context classification with exemplar coresets and experience banks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Exemplar selection arm.
    #[arg(long, value_parser = parse_arm)]
    arm: Option<Arm>,
    /// Include the experience bank in evaluation prompts.
    #[arg(long)]
    sres: bool,
    /// Number of evaluation runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Seed for the command's random decisions.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            arm: self.arm,
            sres: self.sres,
            runs: self.runs,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the exemplar coreset over the training embeddings.
    Optimize(Common),
    /// Evolve the experience bank.
    Evolve(Common),
    /// Evaluate one ablation arm on the test embeddings.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Show the Top-K coreset exemplars for one test record.
    Retrieve {
        #[command(flatten)]
        common: Common,
        /// Test record id.
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write a synthetic benchmark to the configured train/test paths.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Synthetic spec (TOML); defaults to the config's [synth] section.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Optimize(c) => {
            let mut cfg = RunConfig::load(&c.config)?;
            if let Some(s) = c.seed {
                cfg.decs.seed = s;
            }
            println!("{}", pipeline::cmd_optimize(&cfg)?);
        }
        Command::Evolve(c) => {
            let cfg = RunConfig::load(&c.config)?;
            println!("{}", pipeline::cmd_evolve(&cfg, &c.overrides())?);
        }
        Command::Eval { common, json } => {
            let cfg = RunConfig::load(&common.config)?;
            let report = pipeline::cmd_eval(&cfg, &common.overrides())?;
            if json {
                print!("{}", report.to_json());
            } else {
                print!("{}", report.table());
            }
        }
        Command::Retrieve { common, query, k } => {
            let cfg = RunConfig::load(&common.config)?;
            let rows = pipeline::cmd_retrieve(&cfg, &query, k)?;
            print!("{}", pipeline::render_retrieval(&query, &rows));
        }
        Command::Synth { common, spec } => {
            let cfg = RunConfig::load(&common.config)?;
            println!("{}", pipeline::cmd_synth(&cfg, spec.as_deref(), common.seed)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
