use clap::Parser;
use mta_cli::{run, Cli};

fn main() {
    let level = std::env::var("MTA_LOG_LEVEL").unwrap_or_else(|_| "warn".to_string());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();

    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("{}", e.one_line());
        std::process::exit(e.exit_code());
    }
}
