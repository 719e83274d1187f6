fn main() {
    std::process::exit(sdg::cli::main_with_args(std::env::args_os()));
}
