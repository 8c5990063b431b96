fn main() {
    std::process::exit(augnet::cli::main());
}
