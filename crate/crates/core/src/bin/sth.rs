fn main() {
    std::process::exit(sth::cli::main_with_args(std::env::args_os()));
}
