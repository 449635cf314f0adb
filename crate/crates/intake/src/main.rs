use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;
use verde_intake::{run, Args, IntakeError};

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    match run(&args) {
        Ok(report) => {
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let IntakeError::NothingReadable(stats) = &e {
                println!("{}", serde_json::json!({"collection": args.collection, "documents": stats.documents, "chunks": stats.chunks, "skipped": stats.skipped}));
            }
            eprintln!("verde-intake: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
