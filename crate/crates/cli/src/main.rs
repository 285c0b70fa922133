use clap::Parser;

fn main() {
    let cli = textcap_cli::Cli::parse();
    if let Err(e) = textcap_cli::run(&cli) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
