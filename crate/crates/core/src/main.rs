fn main() {
    std::process::exit(dlrm_core::cli::main());
}
