fn main() {
    std::process::exit(valuesrag_cli::main_with_args(std::env::args_os()));
}
