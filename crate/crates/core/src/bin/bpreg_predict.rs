use clap::Parser;

#[derive(Parser)]
#[command(name = "bpreg_predict", version)]
struct Cli {
    #[command(flatten)]
    args: bpreg::cli::PredictArgs,
}

fn main() {
    bpreg::cli::init_logging();
    std::process::exit(bpreg::cli::cmd_predict(&Cli::parse().args));
}
