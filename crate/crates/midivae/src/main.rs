use clap::Parser;

fn main() {
    let cli = midivae::cli::Cli::parse();
    std::process::exit(midivae::cli::run(cli));
}
