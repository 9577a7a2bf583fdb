use std::process::ExitCode;

fn main() -> ExitCode {
    speechfix::cli::main_with(std::env::args_os())
}
