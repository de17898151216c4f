fn main() {
    std::process::exit(sgd_initlab::cli::main_with_args(std::env::args_os()));
}
