fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(sparsepo::cli::run(&argv));
}
