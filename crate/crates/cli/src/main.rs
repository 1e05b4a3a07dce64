use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(dcl_cli::run_cli(std::env::args_os()))
}
