fn main() {
    std::process::exit(mext::cli::main_with(std::env::args_os()));
}
