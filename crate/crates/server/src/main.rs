fn main() {
    pgan_server::cli::init_logging();
    std::process::exit(pgan_server::cli::main_with(std::env::args_os()));
}
