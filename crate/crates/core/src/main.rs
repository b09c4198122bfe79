use log::LevelFilter;

fn main() {
    // No environment lookups: the CLI's state is fully explicit.
    env_logger::Builder::new().filter_level(LevelFilter::Warn).format_timestamp(None).init();
    std::process::exit(repdyn::cli::run_from(std::env::args_os()));
}
