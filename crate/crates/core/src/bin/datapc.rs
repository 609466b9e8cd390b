fn main() {
    std::process::exit(datapc::cli::main_exit_code());
}
