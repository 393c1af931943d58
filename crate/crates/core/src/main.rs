use clap::Parser;

use streamkv::cli::{exit_code, run, Cli};

fn main() {
    match run(Cli::parse()) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
