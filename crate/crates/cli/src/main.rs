fn main() {
    std::process::exit(crossdesc_cli::run(std::env::args_os()));
}
