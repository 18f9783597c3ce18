use std::path::PathBuf;
use std::process::ExitCode;

use anisoline_cli::commands::{self, Outcome};
use anisoline_cli::config::RunConfig;
use anisoline_cli::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "anisoline", version, about = "Anisotropic hierarchical C1 bicubic splines: fitting, adaptive Poisson solves, invariant checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Modified,
    #[value(name = "cross_only")]
    CrossOnly,
}

/// Flags shared by all subcommands; each overrides the same key of the
/// config file.
#[derive(Args)]
struct Common {
    /// key = value file, overridden by flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Fit: fraction of the bbox diagonal. Solve: marking threshold on the cell indicator
    #[arg(long)]
    tolerance: Option<f64>,
    /// Anisotropy threshold (> 1)
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_levels: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gauss points per direction
    #[arg(long)]
    quadrature: Option<usize>,
}

impl Common {
    fn run_config(&self, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut flags = RunConfig::default();
        let strategy = self.strategy.map(|s| match s {
            StrategyArg::Modified => "modified".to_string(),
            StrategyArg::CrossOnly => "cross_only".to_string(),
        });
        let pairs = [
            ("strategy", strategy),
            ("tolerance", self.tolerance.map(|x| x.to_string())),
            ("delta", self.delta.map(|x| x.to_string())),
            ("max_levels", self.max_levels.map(|x| x.to_string())),
            ("seed", self.seed.map(|x| x.to_string())),
            ("quadrature", self.quadrature.map(|x| x.to_string())),
        ];
        for (k, v) in pairs.iter().chain(extra) {
            if let Some(v) = v {
                flags.set(k, v)?;
            }
        }
        cfg.merge(&flags);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Adaptive surface fit of a point set (CSV/JSON file or cone, paraboloid, bernstein)
    Fit {
        input: String,
        #[command(flatten)]
        common: Common,
    },
    /// Adaptive Poisson solve of a registered problem or a problem JSON file
    Solve {
        problem: String,
        #[command(flatten)]
        common: Common,
    },
    /// Randomized invariant suites over refinement sequences
    Verify {
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Corrupt one basis patch before checking (exercises failure reporting)
        #[arg(long, hide = true)]
        inject_fault: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Apply a refinement script and draw every level with its marks
    MeshDemo {
        script: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn init_threads() {
    if let Ok(v) = std::env::var("ANISOLINE_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring ANISOLINE_THREADS={v}: expected a positive integer"),
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Fit { input, common } => commands::fit(&input, &common.run_config(&[])?, &common.out),
        Command::Solve { problem, common } => commands::solve(&problem, &common.run_config(&[])?, &common.out),
        Command::Verify { depth, trials, inject_fault, common } => {
            let cfg = common.run_config(&[("depth", depth.map(|x| x.to_string())), ("trials", trials.map(|x| x.to_string()))])?;
            commands::verify(&cfg, Some(&common.out), inject_fault)
        }
        Command::MeshDemo { script, common } => commands::mesh_demo(&script, &common.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads();
    match run(Cli::parse()) {
        Ok(o) => {
            for l in &o.lines {
                println!("{l}");
            }
            ExitCode::from(o.code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
