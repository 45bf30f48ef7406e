use clap::Parser;
use refine3d::commands::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("refine3d: {e}");
        std::process::exit(e.exit_code());
    }
}
