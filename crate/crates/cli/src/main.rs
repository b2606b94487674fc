fn main() {
    std::process::exit(wsireport_cli::main_with_args(std::env::args_os()));
}
