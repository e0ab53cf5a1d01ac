use clap::Parser;

fn main() {
    let cli = hype_cli::Cli::parse();
    if let Err(err) = hype_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(hype_cli::exit_code(&err));
    }
}
