fn main() {
    std::process::exit(ddx_cli::main_with(std::env::args_os()));
}
