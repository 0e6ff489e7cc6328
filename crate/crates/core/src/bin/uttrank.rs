use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(uttrank::cli::dispatch(std::env::args_os()) as u8)
}
