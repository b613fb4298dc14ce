use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(auxdepth::cli::run(std::env::args_os()) as u8)
}
