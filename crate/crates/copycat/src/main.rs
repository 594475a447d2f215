use std::process::ExitCode;

fn main() -> ExitCode {
    copycat::cli::run()
}
