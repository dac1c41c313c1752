use std::process::ExitCode;

use karma::cli;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let result = cli::parse(&args).and_then(|c| match c {
        Some(c) => cli::run(c, &mut std::io::stdout().lock()),
        None => Ok(()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
