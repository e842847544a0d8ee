use clap::Parser;

#[derive(Parser)]
#[command(name = "bpreg_train", version)]
struct Cli {
    #[command(flatten)]
    args: bpreg::cli::TrainArgs,
}

fn main() {
    bpreg::cli::init_logging();
    std::process::exit(bpreg::cli::cmd_train(&Cli::parse().args));
}
