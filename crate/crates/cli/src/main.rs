use clap::Parser;

fn main() {
    std::process::exit(m2ae_cli::main_with(m2ae_cli::args::Cli::parse()));
}
