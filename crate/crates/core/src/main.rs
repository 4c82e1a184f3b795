use clap::Parser;

fn main() {
    let cli = dio::cli::Cli::parse();
    if let Err(e) = dio::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
