use std::process::exit;

fn main() {
    exit(midg_cli::run_cli(std::env::args_os()));
}
