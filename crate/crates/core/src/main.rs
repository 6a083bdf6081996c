fn main() {
    std::process::exit(pivot_distill::cli::main_with_args(std::env::args_os()));
}
