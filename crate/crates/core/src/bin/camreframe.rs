use std::process::ExitCode;

fn main() -> ExitCode {
    camreframe::cli::main_with_args(std::env::args_os())
}
