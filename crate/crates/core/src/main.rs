fn main() {
    std::process::exit(colxm::cli::main_with_args(std::env::args_os()));
}
