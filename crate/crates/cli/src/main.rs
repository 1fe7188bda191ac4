fn main() {
    std::process::exit(fusemap_cli::run());
}
