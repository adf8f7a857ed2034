fn main() {
    std::process::exit(spdp::cli::run(std::env::args_os()));
}
