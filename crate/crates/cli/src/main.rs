use clap::Parser;
use mplnet_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    if let Err(e) = mplnet_cli::run(&cli) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
