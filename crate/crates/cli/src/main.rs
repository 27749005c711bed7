use clap::Parser;

use ipfsim_cli::{error::exit, execute, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = execute(&cli) {
        eprintln!("ipfsim: {e}");
        std::process::exit(e.exit_code());
    }
    std::process::exit(exit::OK);
}
