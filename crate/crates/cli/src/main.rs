fn main() {
    std::process::exit(ez_cli::run_cli(std::env::args_os()));
}
