fn main() {
    std::process::exit(sam_core::cli::run(std::env::args()));
}
