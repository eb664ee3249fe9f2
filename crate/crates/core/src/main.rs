fn main() {
    std::process::exit(lpqsm::cli::run(std::env::args_os()));
}
