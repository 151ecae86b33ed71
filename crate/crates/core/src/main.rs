fn main() {
    std::process::exit(gessl::harness::cli::run(std::env::args_os()));
}
