fn main() {
    std::process::exit(kunbr::cli::run());
}
