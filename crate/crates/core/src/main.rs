fn main() {
    std::process::exit(fedbatch::cli::main_with_args(std::env::args_os()));
}
