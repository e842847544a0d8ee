use clap::Parser;

fn main() {
    bpreg::cli::init_logging();
    std::process::exit(bpreg::cli::run(bpreg::cli::Cli::parse()));
}
