fn main() {
    std::process::exit(lorafit::cli::run(std::env::args().collect()));
}
