use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spectral_dice_harness::{
    cmd_dump_kernel, cmd_evaluate, cmd_generate, cmd_sweep, ExperimentConfig, HarnessError,
};

#[derive(Parser)]
#[command(name = "spectral-dice", version, about = "Off-policy evaluation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Added to every data seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and store one dataset per (behavior, N, seed).
    Generate(Common),
    /// Run every cell and write results.csv.
    Evaluate(Common),
    /// Dump the next-state kernel of a stored representation at one state.
    DumpKernel {
        #[command(flatten)]
        common: Common,
        /// Representation directory.
        #[arg(long)]
        rep: PathBuf,
        #[arg(long)]
        state: usize,
    },
    /// Evaluate once per configured solver step size.
    Sweep(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.seed_offset = cfg.seed_offset.wrapping_add(common.seed_offset);
    Ok(cfg)
}

fn report(path: &Path, rows: usize, failed: usize) -> ExitCode {
    println!("wrote {} ({rows} rows, {failed} failed)", path.display());
    if failed > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Generate(common) => {
            let manifest = cmd_generate(&load(&common)?)?;
            println!("wrote {}", manifest.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate(common) => {
            let s = cmd_evaluate(&load(&common)?, common.jobs)?;
            Ok(report(&s.results_path, s.rows.len(), s.failed()))
        }
        Command::Sweep(common) => {
            let s = cmd_sweep(&load(&common)?, common.jobs)?;
            Ok(report(&s.results_path, s.rows.len(), s.failed()))
        }
        Command::DumpKernel { common, rep, state } => {
            let cfg = load(&common)?;
            let out = cfg.out_dir.join(format!("kernel_state{state}.csv"));
            cmd_dump_kernel(&cfg, &rep, state, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
