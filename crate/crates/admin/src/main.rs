use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use verde_admin::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(outcome) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(&outcome.render(cli.output));
            let _ = stdout.flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("verde-admin: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
