mod cli;

use clap::Parser;

fn main() {
    let args = cli::Cli::parse();
    let level = if args.quiet { log::LevelFilter::Error } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).parse_env("REGIME_SELECT_LOG").init();
    if let Err(e) = cli::run(args) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
