fn main() {
    std::process::exit(ebatc::harness::cli::run(std::env::args_os()));
}
