fn main() {
    std::process::exit(mmnas::cli::main_with_args(std::env::args_os()));
}
