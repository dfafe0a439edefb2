fn main() {
    std::process::exit(gee::cli::main());
}
