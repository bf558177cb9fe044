use clap::Parser;

fn main() {
    let cli = sejd_cli::Cli::parse();
    if let Err(e) = sejd_cli::run(cli) {
        eprintln!("sejd: {e}");
        std::process::exit(e.exit_code());
    }
}
