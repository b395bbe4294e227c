fn main() {
    std::process::exit(blv::cli::run());
}
