use clap::Parser;
use std::process::ExitCode;
use stereovae_cli::{init_threads, run_task, Cli, CliResult};

fn run(cli: &Cli) -> CliResult<()> {
    init_threads()?;
    let cfg = cli.command.overrides().resolve(cli.command.task())?;
    let summary = run_task(&cfg)?;
    log::debug!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
