use std::process::ExitCode;

fn main() -> ExitCode {
    gradprune::cli::main_with(std::env::args_os())
}
