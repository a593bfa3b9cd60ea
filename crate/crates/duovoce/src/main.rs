use std::process::ExitCode;

fn main() -> ExitCode {
    duovoce::cli::run(std::env::args_os())
}
