fn main() {
    std::process::exit(clothfit_cli::run(std::env::args().collect()));
}
