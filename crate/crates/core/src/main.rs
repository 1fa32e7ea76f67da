fn main() {
    std::process::exit(evodhm::cli::main_with_args(std::env::args_os()));
}
