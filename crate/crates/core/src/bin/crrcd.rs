fn main() {
    std::process::exit(crrcd::cli::main_with(std::env::args_os()));
}
