fn main() {
    std::process::exit(cat_cli::main_with_args(std::env::args_os()));
}
