use std::process::ExitCode;

fn main() -> ExitCode {
    gesture_cli::run(std::env::args_os())
}
