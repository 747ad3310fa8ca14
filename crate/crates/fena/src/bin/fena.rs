use clap::Parser;

fn main() {
    let cli = fena::cli::Cli::parse();
    if let Err(e) = fena::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
