fn main() {
    std::process::exit(prefdyn::cli::main_with(std::env::args_os()));
}
