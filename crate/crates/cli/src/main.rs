use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = prefdiff_cli::Cli::parse();
    match prefdiff_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
