use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use loopstack::{run_file, HarnessError, RunOptions, Task};

#[derive(Debug, Parser)]
#[command(name = "loopstack", version, about = "Looped-window inference harness")]
struct Cli {
    #[arg(value_enum)]
    task: Task,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Zero wall-clock fields so repeated runs are byte-identical.
    #[arg(long)]
    deterministic: bool,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let opts = RunOptions {
        seed: cli.seed,
        deterministic: cli.deterministic,
        out: cli.out,
    };
    let outcome = run_file(cli.task, &cli.config, &opts)
        .with_context(|| format!("{} failed", cli.task.as_str()))?;
    for line in &outcome.log {
        println!("{line}");
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<HarnessError>()
                .map_or(1, HarnessError::exit_code);
            ExitCode::from(code)
        }
    }
}
