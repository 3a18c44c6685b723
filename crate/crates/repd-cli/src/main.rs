fn main() {
    std::process::exit(repd_cli::run(std::env::args_os()));
}
