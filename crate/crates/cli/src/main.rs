use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use physmamba_cli::{run, settings::keys_help, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let keys = keys_help();
    let matches = Cli::command()
        .after_long_help(keys.clone())
        .mut_subcommands(|c| c.after_long_help(keys.clone()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
