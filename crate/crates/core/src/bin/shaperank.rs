fn main() {
    std::process::exit(shaperank::cli::run(std::env::args().collect()));
}
