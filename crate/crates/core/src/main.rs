use clap::Parser;

fn main() {
    let cli = ivediff::cli::Cli::parse();
    if let Err(e) = ivediff::cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
