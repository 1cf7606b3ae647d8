use std::io::Write;

use clap::Parser;
use lfi_node::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            let _ = writeln!(std::io::stdout(), "{text}");
        }
        Err(e) => {
            eprintln!("lfi-node: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
