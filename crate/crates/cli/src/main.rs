use std::process::ExitCode;

use clap::Parser;
use gkp_mbqc_cli::config::{load_file, resolve, Cli, FileConfig, WORKERS_ENV};
use gkp_mbqc_cli::{run, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, flags) = cli.command.split();
    let result = (|| -> Result<String, CliError> {
        let file = match &flags.config {
            Some(p) => load_file(p)?,
            None => FileConfig::default(),
        };
        let env = std::env::var(WORKERS_ENV).ok();
        let cfg = resolve(kind, &flags, &file, env.as_deref())?;
        run(&cfg)
    })();
    match result {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
