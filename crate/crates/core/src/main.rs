fn main() {
    std::process::exit(openseg::cli::main());
}
