use clap::Parser;
use instructrl::cli::{run, Cli, CliOutcome};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        CliOutcome::Ok => {}
        CliOutcome::Usage(msg) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        CliOutcome::Failure(msg) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}
