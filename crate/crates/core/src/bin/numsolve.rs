use std::process::ExitCode;

use clap::Parser;

use numsolve::bench::{run_benchmark, BenchArgs};

fn main() -> ExitCode {
    let args = BenchArgs::parse();
    let mut stdout = std::io::stdout();
    match run_benchmark(&args, &mut stdout) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
