use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::new().filter_or("USR_LOG", "info")).init();
    std::process::exit(usr_core::cli::run(std::env::args_os()));
}
