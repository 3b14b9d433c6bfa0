fn main() {
    std::process::exit(ctista::cli::main_with_args(std::env::args_os()));
}
