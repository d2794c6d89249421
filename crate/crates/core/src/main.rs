fn main() {
    let code = fsacdm::cli::main_with_args(std::env::args_os(), std::env::vars().collect());
    std::process::exit(code);
}
