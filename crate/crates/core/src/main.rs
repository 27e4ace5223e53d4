fn main() {
    std::process::exit(iotrace::cli::main());
}
