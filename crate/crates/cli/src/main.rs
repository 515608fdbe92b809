fn main() {
    std::process::exit(advquery_cli::main_with_args(std::env::args_os()));
}
