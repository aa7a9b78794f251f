use clap::Parser;

fn main() {
    let cli = alit::cli::Cli::parse();
    if let Err(e) = alit::cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
