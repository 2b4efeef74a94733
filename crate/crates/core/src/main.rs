use std::process::ExitCode;

fn main() -> ExitCode {
    compvae::cli::main_with_args(std::env::args_os())
}
