use std::process::ExitCode;

fn main() -> ExitCode {
    repose::harness::cli::main_with(std::env::args_os())
}
