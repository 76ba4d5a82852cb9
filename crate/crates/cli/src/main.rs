use clap::Parser;

fn main() {
    let cli = algm_cli::Cli::parse();
    if let Err(e) = algm_cli::execute(&cli) {
        eprintln!("error: {e}");
        std::process::exit(algm_cli::exit_code(&e));
    }
}
