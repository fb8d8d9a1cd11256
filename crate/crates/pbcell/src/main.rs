use clap::Parser;

fn main() {
    let cli = pbcell::cli::Cli::parse();
    std::process::exit(pbcell::cli::run(cli));
}
