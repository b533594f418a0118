fn main() {
    std::process::exit(czsl::cli::run(std::env::args()));
}
