fn main() {
    std::process::exit(qgnn::cli::main_with(std::env::args_os()));
}
