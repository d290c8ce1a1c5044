use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use unfold_homog_cli::run::{run, Command, RunOptions, THREADS_ENV};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    Validate,
    Cell,
    Fine,
    Homogenize,
    Converge,
    UnfoldCheck,
    Equivalence,
}

/// Periodic unfolding and homogenization on chart-described manifolds.
#[derive(Parser, Debug)]
#[command(name = "unfold-homog", version)]
struct Args {
    #[arg(value_enum)]
    subcommand: Sub,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = THREADS_ENV)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
}

fn main() {
    let a = Args::parse();
    let cmd = match a.subcommand {
        Sub::Validate => Command::Validate,
        Sub::Cell => Command::Cell,
        Sub::Fine => Command::Fine,
        Sub::Homogenize => Command::Homogenize,
        Sub::Converge => Command::Converge,
        Sub::UnfoldCheck => Command::UnfoldCheck,
        Sub::Equivalence => Command::Equivalence,
    };
    let outcome = run(
        cmd,
        &RunOptions {
            config: a.config,
            out: a.out,
            threads: a.threads,
            seed: a.seed,
            tol: a.tol,
        },
    );
    for m in &outcome.messages {
        eprintln!("{m}");
    }
    if let Some(reason) = &outcome.reason {
        eprintln!("{}", serde_json::json!({"exit_code": outcome.code, "reason": reason}));
    }
    if let Some(dir) = &outcome.out_dir {
        println!("{}: {} ({})", cmd, if outcome.code == 0 { "ok" } else { "failed" }, dir.display());
    }
    std::process::exit(outcome.code);
}
