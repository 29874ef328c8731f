use clap::Parser;

use veritas::cli::{report, run, Cli};

fn main() {
    if let Err(err) = run(Cli::parse()) {
        let (line, code) = report(&err);
        eprintln!("{line}");
        std::process::exit(code);
    }
}
