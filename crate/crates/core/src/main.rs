use std::process::ExitCode;

fn main() -> ExitCode {
    cpcm::cli::main_from(std::env::args_os())
}
