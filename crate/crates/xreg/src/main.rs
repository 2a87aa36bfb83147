fn main() {
    std::process::exit(xreg::cli::main_with_args(std::env::args_os()));
}
