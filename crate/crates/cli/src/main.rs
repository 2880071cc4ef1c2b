use std::process::ExitCode;

fn main() -> ExitCode {
    actionguide_cli::cli::run(std::env::args_os())
}
