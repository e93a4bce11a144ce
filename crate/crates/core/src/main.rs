fn main() {
    std::process::exit(subgram::cli::main_with_args(std::env::args_os()));
}
