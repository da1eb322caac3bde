use clap::Parser;

use essflow::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("essflow: {e}");
        std::process::exit(e.exit_code());
    }
}
