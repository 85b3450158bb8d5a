fn main() {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    std::process::exit(attractor::cli::run(std::env::args()));
}
