fn main() {
    std::process::exit(kcplan::cli::main_with_args(std::env::args_os()));
}
