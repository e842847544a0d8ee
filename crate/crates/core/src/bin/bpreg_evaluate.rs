use clap::Parser;

#[derive(Parser)]
#[command(name = "bpreg_evaluate", version)]
struct Cli {
    #[command(flatten)]
    args: bpreg::cli::EvaluateArgs,
}

fn main() {
    bpreg::cli::init_logging();
    std::process::exit(bpreg::cli::cmd_evaluate(&Cli::parse().args));
}
