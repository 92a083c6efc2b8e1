use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use s2ip::harness::{parse_config, run, Command};

#[derive(Parser)]
#[command(name = "s2ip", version, about = "Prompted LLM-backbone time-series forecasting")]
struct Cli {
    /// train | evaluate | forecast | ablate | gen-data | export-embeddings
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = parse_config(&cli.config).and_then(|mut config| {
        if let Some(seed) = cli.seed {
            config.train.seed = seed;
        }
        if let Some(out) = cli.out {
            config.output_dir = out;
        }
        run(cli.command, &config)
    });
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
