use clap::Parser;

fn main() {
    let cli = aher_core::cli::Cli::parse();
    std::process::exit(aher_core::cli::main_with(cli));
}
