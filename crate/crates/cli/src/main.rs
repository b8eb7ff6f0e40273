use clap::Parser;

fn main() {
    let cli = gpggm_cli::Cli::parse();
    if let Err(err) = gpggm_cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(gpggm_cli::exit_code(&err));
    }
}
