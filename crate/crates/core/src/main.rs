fn main() {
    std::process::exit(cytocount::cli::main_with_args(std::env::args_os()));
}
