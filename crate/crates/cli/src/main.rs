use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use novelty_sac_cli::{cmd_eval, cmd_plot, cmd_recover, cmd_train, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "novelty-sac", version, about = "Train and deploy novelty-constrained SAC policy libraries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy library.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate one library entry.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        library: PathBuf,
        #[arg(long, default_value_t = 0)]
        policy: usize,
        /// Defaults to the configured episode count.
        #[arg(long)]
        episodes: Option<usize>,
        /// Fail instead of taking the least-violating candidate.
        #[arg(long)]
        no_fallback: bool,
    },
    /// Matched-seed recovery experiment: contingency policies against random actions.
    Recover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        library: PathBuf,
        /// Defaults to the configured seed count.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Render geometry and trajectories as SVG.
    Plot {
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// File stem; `.svg` is appended.
        #[arg(long, default_value = "plot")]
        name: String,
        /// Trajectory files or recovery traces.
        inputs: Vec<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => {
            let cfg = load(&common)?;
            let summary = cmd_train(&cfg)?;
            print!("{}", summary.to_text());
        }
        Command::Eval {
            common,
            library,
            policy,
            episodes,
            no_fallback,
        } => {
            let cfg = load(&common)?;
            let episodes = episodes.unwrap_or(cfg.eval.episodes);
            let fallback = no_fallback.then_some(false);
            let (report, path) = cmd_eval(&cfg, &library, policy, episodes, cfg.seed, fallback)?;
            print!("{}", report.to_text());
            println!("trajectories={}", path.display());
        }
        Command::Recover { common, library, seeds } => {
            let mut cfg = load(&common)?;
            if let Some(n) = seeds {
                cfg.experiment.seeds = n;
            }
            let report = cmd_recover(&cfg, &library)?;
            print!("{}", report.summary());
        }
        Command::Plot {
            geometry,
            out,
            name,
            inputs,
        } => {
            let stem = name.strip_suffix(".svg").unwrap_or(&name);
            let path = out.join(format!("{stem}.svg"));
            cmd_plot(&geometry, &inputs, &path, stem)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
