fn main() {
    std::process::exit(hybrid_control::cli::run(std::env::args()));
}
