use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mudeep::cli::main_entry(std::env::args()) as u8)
}
