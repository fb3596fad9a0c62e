fn main() {
    let code = vidm::cli::run(std::env::args().collect());
    std::process::exit(code);
}
