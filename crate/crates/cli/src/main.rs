fn main() {
    std::process::exit(apl_cli::main_with(std::env::args_os()));
}
