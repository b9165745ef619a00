use clap::Parser;
use devl::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
