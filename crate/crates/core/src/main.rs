fn main() {
    std::process::exit(planecast::cli::run());
}
