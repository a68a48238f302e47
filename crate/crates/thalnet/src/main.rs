use clap::Parser;

fn main() {
    let cli = thalnet::cli::Cli::parse();
    if let Err(e) = thalnet::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
