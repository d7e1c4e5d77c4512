fn main() {
    std::process::exit(attnpose::cli::main_with_args(std::env::args_os()));
}
