fn main() {
    std::process::exit(sdae::cli::run(std::env::args().skip(1)));
}
