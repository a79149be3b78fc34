use clap::Parser;

fn main() {
    std::process::exit(quorum_ra::cli::run(quorum_ra::cli::Cli::parse()));
}
