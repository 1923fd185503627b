fn main() {
    std::process::exit(hamlie::cli::run());
}
