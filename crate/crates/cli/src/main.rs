fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NEGMIX_LOG", "warn")).init();
    std::process::exit(negmix_cli::run_from(std::env::args_os()));
}
