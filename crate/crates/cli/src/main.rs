use std::process::ExitCode;

use clap::Parser;
use ensemble_uq_cli::{exit_code, run, Cli, EXIT_GENERIC};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_GENERIC)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log.filter())
        .format_timestamp(None)
        .init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_GENERIC);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(EXIT_GENERIC);
        }
    }

    match run(&cli.command) {
        Ok(paths) => {
            for p in paths {
                log::info!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
