fn main() {
    std::process::exit(avsd::cli::run());
}
