use clap::Parser;
use steerbo_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("steerbo: {e}");
        std::process::exit(e.exit_code());
    }
}
