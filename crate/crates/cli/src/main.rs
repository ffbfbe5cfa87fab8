fn main() {
    std::process::exit(nsk_cli::run_command(std::env::args_os()));
}
